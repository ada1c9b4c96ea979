"""Forward and backward passes of the language model.

:func:`forward_reversible` keeps only the current :class:`StateCarrier`
(plus the embedding output as an anchor and one norm per layer);
:func:`backward_reversible` walks the layers backwards, recovering each
earlier carrier through the inverse update and recomputing the layer
internals right before applying their VJPs. :func:`forward_stored` and
:func:`backward_stored` keep everything and serve as the reference.
"""
import logging

import attr
import numpy as np

from .blocks import (
    as_tokens, embed, embed_vjp, initial_carrier, layer_input, project_logits, state_norm,
)
from .exceptions import (
    CarrierMismatchError, NonFiniteError, NotInvertibleError, ReconstructionError,
)
from .model import ParameterTree
from .numerics import cross_entropy, linear_vjp, relative_error
from .step import step

log = logging.getLogger("engine")

#: A recovered state whose norm exceeds this multiple of its forward norm aborts the backward pass.
RECONSTRUCTION_GUARD = 1e3

ANCHOR_TOLERANCE = {
    np.dtype(np.float32): 1e-3,
    np.dtype(np.float64): 1e-8,
}

SCALAR_BYTES = 8


@attr.s(eq=False)
class ActivationLedger:
    """Counts what a forward pass keeps alive for the backward pass."""
    tensors_stored = attr.ib(default=0)
    scalars_stored = attr.ib(default=0)
    bytes_stored = attr.ib(default=0)
    peak_bytes = attr.ib(default=0)

    def store(self, *tensors):
        for t in tensors:
            self.tensors_stored += 1
            self.bytes_stored += t.nbytes
        self.peak_bytes = max(self.peak_bytes, self.bytes_stored)

    def store_scalars(self, count=1):
        self.scalars_stored += count
        self.bytes_stored += SCALAR_BYTES * count
        self.peak_bytes = max(self.peak_bytes, self.bytes_stored)

    def observe_transient(self, nbytes):
        """Records memory that is live only while one layer is evaluated."""
        self.peak_bytes = max(self.peak_bytes, self.bytes_stored + nbytes)

    def reset(self):
        self.tensors_stored = self.scalars_stored = self.bytes_stored = self.peak_bytes = 0


def _nbytes(*tensors):
    return sum(t.nbytes for t in tensors)


@attr.s(eq=False)
class GradientBundle(ParameterTree):
    """Gradients for every parameter tensor, shaped like the model's."""
    embedding = attr.ib()
    blocks = attr.ib()
    anchor_error = attr.ib(default=None)

    @classmethod
    def zeros_like(cls, model):
        return cls(model.embedding.zeros_like(), model.blocks.zeros_like())

    def global_norm(self):
        return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                                 for g in self.named_tensors().values())))


@attr.s(eq=False)
class ForwardResult:
    """Output of a forward pass.

    ``carrier`` is the final carrier; ``anchor`` and ``norms`` are what the
    reversible backward needs, ``states``/``carriers``/``caches`` are only
    filled by the stored engine.
    """
    logits = attr.ib()
    carrier = attr.ib()
    ledger = attr.ib()
    tokens = attr.ib()
    config = attr.ib()
    anchor = attr.ib(default=None)
    norms = attr.ib(factory=list)
    states = attr.ib(default=None)
    carriers = attr.ib(default=None)
    caches = attr.ib(default=None)

    @property
    def reversible(self):
        return self.states is None


@step(title='forward_reversible')
def forward_reversible(tokens, model):
    """Runs the model keeping a constant number of tensors, independent of depth."""
    config = model.config
    if not config.reversible:
        raise NotInvertibleError(
            f"{config.block_kind} blocks cannot run reversibly, use forward_stored"
        )
    tokens = as_tokens(tokens)
    ledger = ActivationLedger()
    p0 = embed(tokens, model.embedding)
    ledger.store(p0)
    carrier = initial_carrier(p0, config)
    norms = [state_norm(carrier)]
    for rule in model.rules():
        carrier, cache = rule.forward(carrier, model.blocks, config)
        ledger.observe_transient(_nbytes(*cache.tensors(), *carrier.tensors()))
        norms.append(state_norm(carrier))
    ledger.store_scalars(len(norms))
    ledger.store(*carrier.tensors())
    logits = project_logits(layer_input(carrier.output, config), model.embedding)
    log.debug("reversible forward: %d tensors, %d scalars, peak %d bytes",
              ledger.tensors_stored, ledger.scalars_stored, ledger.peak_bytes)
    return ForwardResult(logits, carrier, ledger, tokens, config, anchor=p0, norms=norms)


@step(title='forward_stored')
def forward_stored(tokens, model):
    """Runs the model retaining every state and every layer's internals."""
    config = model.config
    tokens = as_tokens(tokens)
    ledger = ActivationLedger()
    p0 = embed(tokens, model.embedding)
    ledger.store(p0)
    carrier = initial_carrier(p0, config)
    carriers, caches, states = [], [], [p0]
    for rule in model.rules():
        carriers.append(carrier)
        carrier, cache = rule.forward(carrier, model.blocks, config)
        caches.append(cache)
        if config.block_kind == 'hamiltonian':
            ledger.store(*carrier.tensors())
        else:
            ledger.store(carrier.output)
        ledger.store(*cache.tensors())
        states.append(carrier.output)
    logits = project_logits(layer_input(carrier.output, config), model.embedding)
    return ForwardResult(logits, carrier, ledger, tokens, config, anchor=p0,
                         states=states, carriers=carriers, caches=caches)


def _check_forward(forward, model, dlogits):
    if forward.config != model.config:
        raise CarrierMismatchError("forward result was produced by a different model config")
    if dlogits.shape != forward.logits.shape:
        raise CarrierMismatchError(
            f"dlogits shape {dlogits.shape} does not match logits {forward.logits.shape}"
        )
    if forward.carrier.output.shape[-1] != model.config.width:
        raise CarrierMismatchError("carrier width does not match the model")


def _backward(forward, dlogits, model, recover):
    grads = GradientBundle.zeros_like(model)
    carrier = forward.carrier
    g_out, d_projection, _ = linear_vjp(
        dlogits, layer_input(carrier.output, model.config), model.embedding.projection)
    grads.embedding.projection += d_projection
    adjoint = carrier.output_adjoint(g_out)
    rules = model.rules()
    for i in reversed(range(len(rules))):
        carrier, cache = recover(i, rules[i], carrier)
        adjoint = rules[i].vjp(adjoint, cache, model.blocks, model.config, grads.blocks)
    embed_vjp(adjoint.total(), forward.tokens, grads.embedding)
    return grads, carrier


@step(title='backward_reversible')
def backward_reversible(forward, dlogits, model, observer=None, guard=RECONSTRUCTION_GUARD):
    """Backpropagates through a reversible forward pass by reconstructing states.

    ``observer(layer, carrier)`` is called with every recovered carrier, the
    state before ``layer`` was applied. Raises :class:`ReconstructionError`
    when a recovered state is non-finite or its norm exceeds ``guard``
    times the norm seen during the forward pass.
    """
    if not forward.reversible:
        raise CarrierMismatchError("backward_reversible needs a forward_reversible result")
    _check_forward(forward, model, dlogits)

    def recover(i, rule, carrier):
        previous, cache = rule.reverse(carrier, model.blocks, model.config)
        if not all(np.isfinite(t).all() for t in previous.tensors()):
            raise ReconstructionError(f"non-finite state recovered before layer {i}", layer=i)
        norm = state_norm(previous)
        if norm > guard * max(forward.norms[i], np.finfo(np.float64).tiny):
            raise ReconstructionError(
                f"recovered state before layer {i} has norm {norm:.3e}, "
                f"forward norm was {forward.norms[i]:.3e}",
                layer=i,
            )
        if observer is not None:
            observer(i, previous)
        return previous, cache

    grads, carrier = _backward(forward, dlogits, model, recover)
    grads.anchor_error = max(relative_error(t, forward.anchor) for t in carrier.tensors())
    tolerance = ANCHOR_TOLERANCE[np.dtype(forward.anchor.dtype)]
    if grads.anchor_error > tolerance:
        log.warning("reconstructed embedding deviates from the anchor by %.3e",
                    grads.anchor_error)
    else:
        log.debug("anchor error %.3e", grads.anchor_error)
    return grads


@step(title='backward_stored')
def backward_stored(forward, dlogits, model):
    if forward.reversible:
        raise CarrierMismatchError("backward_stored needs a forward_stored result")
    _check_forward(forward, model, dlogits)

    def recover(i, rule, carrier):
        return forward.carriers[i], forward.caches[i]

    return _backward(forward, dlogits, model, recover)[0]


def engine_for(model, engine='auto'):
    """Returns the (forward, backward) pair for an engine name: auto, reversible or stored."""
    if engine == 'auto':
        engine = 'reversible' if model.config.reversible else 'stored'
    if engine == 'reversible':
        return forward_reversible, backward_reversible
    if engine == 'stored':
        return forward_stored, backward_stored
    raise ValueError(f"unknown engine '{engine}'")


def loss_and_gradients(tokens, targets, model, engine='auto'):
    forward, backward = engine_for(model, engine)
    result = forward(tokens, model)
    loss, dlogits = cross_entropy(result.logits, targets)
    if not np.isfinite(loss):
        raise NonFiniteError(
            f"non-finite loss {loss} ({model.config.block_kind}, max |logit| "
            f"{np.abs(result.logits).max():.3e})"
        )
    return loss, backward(result, dlogits, model), result.ledger


@attr.s(eq=False)
class TrainStepResult:
    loss = attr.ib()
    model = attr.ib()
    ledger = attr.ib()
    grad_norm = attr.ib()


@step(title='train_step')
def train_step(tokens, targets, model, optimizer_state, engine='auto'):
    """One optimization step; returns the loss, the updated model and the ledger.

    ``optimizer_state`` is advanced in place.
    """
    loss, grads, ledger = loss_and_gradients(tokens, targets, model, engine)
    named, grad_norm = optimizer_state.update(model.named_tensors(), grads.named_tensors())
    return TrainStepResult(loss, model.replace_tensors(named), ledger, grad_norm)


def generate(model, prompt, length, temperature=0.0, rng=None):
    """Extends a token sequence by sampling; temperature 0 picks the most likely token."""
    forward = engine_for(model)[0]
    tokens = [int(t) for t in prompt]
    window = model.config.context_length
    for _ in range(length):
        logits = forward(np.array([tokens[-window:]]), model).logits[0, -1].astype(np.float64)
        if temperature <= 0.0:
            tokens.append(int(np.argmax(logits)))
            continue
        weights = np.exp((logits - logits.max()) / temperature)
        tokens.append(int(rng.generator.choice(len(weights), p=weights / weights.sum())))
    return tokens
