"""Invariant suites run by the ``grad-check`` and ``invert-check`` commands."""
import logging

import attr
import colors
import numpy as np

from .engine import backward_reversible, backward_stored, forward_reversible, forward_stored
from .exceptions import ReconstructionError
from .gradcheck import numeric_gradient
from .numerics import Rng, cross_entropy, relative_error

log = logging.getLogger("verify")

INVERT_TOLERANCE = {
    np.dtype(np.float32): 1e-4,
    np.dtype(np.float64): 1e-10,
}
ORACLE_TOLERANCE = {
    np.dtype(np.float32): 1e-4,
    np.dtype(np.float64): 1e-10,
}
FINITE_DIFFERENCE_TOLERANCE = 1e-6
FINITE_DIFFERENCE_STEP = 1e-5
#: Gradients below this fraction of the largest gradient are compared against that fraction.
FINITE_DIFFERENCE_FLOOR = 1e-2


@attr.s(frozen=True)
class Check:
    name = attr.ib()
    measured = attr.ib()
    tolerance = attr.ib()
    layer = attr.ib(default=None)
    detail = attr.ib(default=None)

    @property
    def passed(self):
        return bool(np.isfinite(self.measured) and self.measured <= self.tolerance)

    def __str__(self):
        status = colors.color('PASS', fg='green') if self.passed else colors.color('FAIL', fg='red')
        text = f"{status} {self.name}: {self.measured:.3e} (tolerance {self.tolerance:.1e})"
        if self.detail:
            text += f" {self.detail}"
        return text


@attr.s(eq=False)
class SuiteReport:
    title = attr.ib()
    checks = attr.ib(factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def format(self):
        lines = [colors.color(self.title, style='bold')]
        lines.extend(f"  {c}" for c in self.checks)
        verdict = 'all checks passed' if self.passed else f"{len(self.failures())} check(s) failed"
        lines.append(f"  {verdict}")
        return "\n".join(lines)


def random_batch(model, seq_len, batch_size, seed):
    rng = Rng(seed, (4,))
    seq_len = min(seq_len, model.config.context_length)
    tokens = rng.integers(0, model.config.vocab_size, (batch_size, seq_len + 1))
    return tokens[:, :-1], tokens[:, 1:]


def _corrupted(carrier, scale):
    rng = Rng(0, (6,))
    noisy = [t + rng.normal(t.shape, scale * float(np.abs(t).max()), t.dtype.name)
             for t in carrier.tensors()]
    return type(carrier)(*noisy)


def invert_check(model, tokens, tolerance=None, corrupt=None):
    """Compares every state recovered during the backward pass with the stored forward.

    ``corrupt`` adds noise of that fraction of its magnitude to the final carrier
    before the backward pass, which must make the check fail.
    """
    tolerance = tolerance or INVERT_TOLERANCE[np.dtype(model.dtype)]
    report = SuiteReport(f"invert-check {model.config.block_kind} ({model.dtype})")
    stored = forward_stored(tokens, model)
    result = forward_reversible(tokens, model)
    if corrupt:
        result.carrier = _corrupted(result.carrier, corrupt)
    recovered = {}

    def observer(layer, carrier):
        recovered[layer] = carrier

    try:
        grads = backward_reversible(result, np.zeros_like(result.logits), model, observer=observer)
    except ReconstructionError as e:
        report.checks.append(Check("reconstruction", np.inf, tolerance, layer=e.layer,
                                   detail=f"layer {e.layer}: {e.msg}"))
        return report
    report.checks.append(Check("logits vs stored forward",
                               relative_error(result.logits, stored.logits), tolerance))
    for layer in sorted(recovered, reverse=True):
        expected = stored.carriers[layer]
        err = max(relative_error(a, b) for a, b in zip(recovered[layer].tensors(),
                                                       expected.tensors()))
        report.checks.append(Check(f"state before layer {layer}", err, tolerance, layer=layer))
    report.checks.append(Check("embedding anchor", grads.anchor_error, tolerance))
    return report


def compare_gradients(a, b):
    """Largest per-tensor relative error between two gradient bundles, with its tensor name."""
    worst, worst_name = 0.0, None
    named_b = b.named_tensors()
    for name, ga in a.named_tensors().items():
        err = relative_error(ga, named_b[name])
        if err >= worst:
            worst, worst_name = err, name
    return worst, worst_name


def _loss_function(tokens, targets, model):
    def loss():
        return cross_entropy(forward_stored(tokens, model).logits, targets)[0]
    return loss


def grad_check(model, tokens, targets, fd_entries=2, seed=0, tolerance=None):
    """Checks reversible gradients against the stored oracle and finite differences.

    Finite differences run in float64 only, probing ``fd_entries`` random
    entries of every parameter tensor.
    """
    dtype = np.dtype(model.dtype)
    tolerance = tolerance or ORACLE_TOLERANCE[dtype]
    report = SuiteReport(f"grad-check {model.config.block_kind} ({model.dtype})")
    stored = forward_stored(tokens, model)
    _, dlogits = cross_entropy(stored.logits, targets)
    oracle = backward_stored(stored, dlogits, model)
    if model.config.reversible:
        result = forward_reversible(tokens, model)
        grads = backward_reversible(result, dlogits, model)
        err, name = compare_gradients(grads, oracle)
        report.checks.append(Check("reversible vs stored gradients", err, tolerance,
                                   detail=f"worst tensor {name}"))
    if fd_entries and dtype == np.float64:
        rng = Rng(seed, (5,))
        loss = _loss_function(tokens, targets, model)
        analytic = oracle.named_tensors()
        floor = FINITE_DIFFERENCE_FLOOR * max(float(np.abs(g).max()) for g in analytic.values())
        worst, worst_name = 0.0, None
        for i, (name, tensor) in enumerate(model.named_tensors().items()):
            indices = rng.child(i).integers(0, tensor.size, fd_entries)
            numeric = numeric_gradient(loss, tensor, eps=FINITE_DIFFERENCE_STEP, indices=indices)
            expected = analytic[name].reshape(-1)[indices]
            scale = max(float(np.abs(analytic[name]).max()), floor, 1e-12)
            err = float(np.abs(numeric.reshape(-1)[indices] - expected).max()) / scale
            log.debug("finite differences on %s: %.3e", name, err)
            if err >= worst:
                worst, worst_name = err, name
        report.checks.append(Check("stored gradients vs finite differences", worst,
                                   FINITE_DIFFERENCE_TOLERANCE, detail=f"worst tensor {worst_name}"))
    return report
