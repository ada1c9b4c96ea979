"""Conversion of a trained residual model into a reversible one.

The residual update ``p_{j+1} = p_j + f_j(p_j)`` is rewritten as a two-term
rule whose previous-state dependence goes through an estimate
``p̂_{j-1} ≈ p_j − f_{j-1}(p̂_{j-1})`` computed by fixed-point iteration from
the current state only. The converted student is then distilled towards the
frozen teacher by minimizing KL(student ‖ teacher) over next-token
distributions.
"""
import csv
import logging

import attr
import numpy as np

from .blocks import TwoTermRule, layer_fn, layer_fn_forward, layer_fn_vjp
from .data import sample_batch
from .engine import engine_for, forward_stored
from .exceptions import DivergenceError, InvalidConfigError, NonFiniteError
from .numerics import Rng, kl_divergence
from .optim import AdamWConfig, AdamWState
from .stability import sample_a
from .step import step

log = logging.getLogger("retrofit")

#: The fixed-point iterate may not grow beyond this multiple of its starting norm.
DIVERGENCE_GUARD = 1e3

A_MODES = ('random', 'ones')


def fixed_point_estimate(p_cur, f, k, guard=DIVERGENCE_GUARD):
    """Iterates x ← p_cur − f(x) k times starting from x = p_cur."""
    if k < 1:
        raise InvalidConfigError(f"fixed point iterations must be at least 1, got {k}")
    limit = guard * max(float(np.linalg.norm(p_cur)), np.finfo(np.float64).tiny)
    x = p_cur
    for m in range(k):
        x = p_cur - f(x)
        norm = float(np.linalg.norm(x))
        if not np.isfinite(norm) or norm > limit:
            raise DivergenceError(
                f"fixed point iteration diverged at step {m + 1} (norm {norm:.3e})"
            )
    return x


def estimate_prev(p_cur, params, layer, k, config):
    """Estimates the state entering ``layer`` from the state it produced."""
    return fixed_point_estimate(p_cur, lambda x: layer_fn(x, params, layer, config), k)


@attr.s(eq=False)
class RetrofitCache:
    iterations = attr.ib()
    prev = attr.ib()
    cur = attr.ib()
    p_hat = attr.ib()

    def tensors(self):
        tensors = (self.p_hat,) + self.prev.tensors() + self.cur.tensors()
        for cache in self.iterations:
            tensors += cache.tensors()
        return tensors


@attr.s(frozen=True)
class RetrofitRule(TwoTermRule):
    """p_{j+1} = a·p_{j−1} + (1−a)·p_j + h·(f_j(p_j) + a·f_{j−1}(p̂_{j−1})).

    With ``skip='estimate'`` the first term uses p̂_{j−1} instead of the
    carried state; the update then depends on p_j alone and cannot be
    inverted.
    """
    a = attr.ib(default=1.0)
    k = attr.ib(default=1)
    h = attr.ib(default=1.0)
    skip = attr.ib(default='carrier')

    def __attrs_post_init__(self):
        if self.a == 0:
            raise InvalidConfigError("retrofit coefficient a must be non-zero")
        if self.layer < 1:
            raise InvalidConfigError("retrofit steps start at the second layer")

    @property
    def alpha(self):
        return self.a if self.skip == 'carrier' else 0.0

    @property
    def beta(self):
        return 1.0 - self.a

    def update(self, p_cur, params, config):
        prev_layer = self.layer - 1
        limit = DIVERGENCE_GUARD * max(float(np.linalg.norm(p_cur)), np.finfo(np.float64).tiny)
        iterations = []
        x = p_cur
        for m in range(self.k):
            f, cache = layer_fn_forward(x, params, prev_layer, config)
            iterations.append(cache)
            x = p_cur - f
            norm = float(np.linalg.norm(x))
            if not np.isfinite(norm) or norm > limit:
                raise DivergenceError(
                    f"fixed point estimate for layer {prev_layer} diverged at step {m + 1}"
                )
        f_prev, prev_cache = layer_fn_forward(x, params, prev_layer, config)
        f_cur, cur_cache = layer_fn_forward(p_cur, params, self.layer, config)
        u = self.h * (f_cur + self.a * f_prev)
        if self.skip == 'estimate':
            u = u + self.a * x
        return u, RetrofitCache(iterations, prev_cache, cur_cache, x)

    def update_vjp(self, g, cache, params, config, grads):
        prev_layer = self.layer - 1
        scaled = self.h * g
        dp = layer_fn_vjp(scaled, cache.cur, params, self.layer, config, grads[self.layer])
        dx = layer_fn_vjp(self.a * scaled, cache.prev, params, prev_layer, config,
                          grads[prev_layer])
        if self.skip == 'estimate':
            dx = dx + self.a * g
        for iteration in reversed(cache.iterations):
            dp = dp + dx
            dx = layer_fn_vjp(-dx, iteration, params, prev_layer, config, grads[prev_layer])
        return dp + dx


def retrofit_step(carrier, params, j, a, config, k=1, h=1.0):
    return RetrofitRule(j, a, k, h).step(carrier, params, config)


def retrofit_inverse(carrier, params, j, a, config, k=1, h=1.0):
    return RetrofitRule(j, a, k, h).inverse(carrier, params, config)


@attr.s(frozen=True)
class LinearErrorReport:
    """``closed_form`` and ``bound`` describe the measured difference.

    ``asserted_closed_form`` is ‖A(I − a(I − A²))p‖ and ``asserted_bound``
    ‖A‖·‖(1 − a)I − aA²‖·‖p‖, the forms usually quoted for this network.
    The quoted closed form matches the carried-term difference only at
    a = 1; elsewhere the measured error can exceed the quoted bound.
    """
    measured = attr.ib()
    closed_form = attr.ib()
    bound = attr.ib()
    asserted_closed_form = attr.ib(default=None)
    asserted_bound = attr.ib(default=None)


def linear_error_bound(A, a, p_prev, A_next=None, skip='carrier'):
    """Error of the retrofitted step for linear layers f(x) = A·x.

    Builds the exact two-layer residual network and its retrofitted
    counterpart from p_prev and returns the measured difference together
    with its closed form and a norm bound. With the carried first term the
    difference is −a·A³·p_prev; with the estimated one it is
    −a·(I + A)·A²·p_prev.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    A_next = A if A_next is None else np.asarray(A_next, dtype=np.float64)
    p_prev = np.asarray(p_prev, dtype=np.float64)
    eye = np.eye(A.shape[0])
    p_cur = p_prev + A @ p_prev
    exact = a * p_prev + (1.0 - a) * p_cur + A_next @ p_cur + a * (A @ p_prev)
    p_hat = p_cur - A @ p_cur
    first = p_prev if skip == 'carrier' else p_hat
    approx = a * first + (1.0 - a) * p_cur + A_next @ p_cur + a * (A @ p_hat)
    A2 = A @ A
    norm_a = np.linalg.norm(A, 2)
    norm_p = np.linalg.norm(p_prev)
    if skip == 'carrier':
        difference = -a * (A2 @ A @ p_prev)
        bound = abs(a) * norm_a ** 3 * norm_p
    else:
        difference = -a * ((eye + A) @ A2 @ p_prev)
        bound = abs(a) * (1.0 + norm_a) * norm_a ** 2 * norm_p
    asserted = A @ (eye - a * (eye - A2)) @ p_prev
    asserted_bound = norm_a * np.linalg.norm((1.0 - a) * eye - a * A2, 2) * norm_p
    return LinearErrorReport(
        measured=float(np.linalg.norm(approx - exact)),
        closed_form=float(np.linalg.norm(difference)),
        bound=float(bound),
        asserted_closed_form=float(np.linalg.norm(asserted)),
        asserted_bound=float(asserted_bound),
    )


def _non_zero_floats(value):
    if value is None:
        return None
    value = tuple(float(v) for v in value)
    if any(v == 0.0 for v in value):
        raise InvalidConfigError("a_schedule entries must be non-zero")
    return value


@attr.s(frozen=True)
class RetrofitConfig:
    k_fixed_point = attr.ib(default=1, converter=int)
    a_mode = attr.ib(default='random', validator=attr.validators.in_(A_MODES))
    a_schedule = attr.ib(default=None, converter=_non_zero_floats)
    a_seed = attr.ib(default=0, converter=int)
    skip = attr.ib(default='carrier', validator=attr.validators.in_(('carrier', 'estimate')))
    step_size = attr.ib(default=1.0, converter=float)
    kl_steps = attr.ib(default=200, converter=int)
    kl_learning_rate = attr.ib(default=1e-4, converter=float)
    batch_size = attr.ib(default=8, converter=int)
    seq_len = attr.ib(default=None)
    eval_batches = attr.ib(default=4, converter=int)
    log_interval = attr.ib(default=50, converter=int)

    def __attrs_post_init__(self):
        if self.k_fixed_point < 1:
            raise InvalidConfigError("k_fixed_point must be at least 1")
        if self.kl_steps < 0:
            raise InvalidConfigError("kl_steps must not be negative")

    def schedule(self, layers):
        if self.a_schedule is not None:
            if len(self.a_schedule) != layers - 1:
                raise InvalidConfigError(
                    f"a_schedule needs {layers - 1} entries, got {len(self.a_schedule)}"
                )
            return self.a_schedule
        if self.a_mode == 'ones':
            return (1.0,) * (layers - 1)
        return tuple(float(a) for a in sample_a(Rng(self.a_seed, (1,)), layers - 1))


def convert(teacher, config):
    """Returns a retrofit student holding a copy of the teacher's weights."""
    if teacher.config.block_kind != 'baseline':
        raise InvalidConfigError(
            f"only baseline models can be retrofitted, got {teacher.config.block_kind}"
        )
    return teacher.copy(
        block_kind='retrofit',
        a_schedule=config.schedule(teacher.config.layers),
        retrofit_k=config.k_fixed_point,
        retrofit_skip=config.skip,
        step_size=config.step_size,
    )


def agreement(teacher_logits, student_logits):
    """Fraction of positions whose most likely next token is the same."""
    return float(np.mean(teacher_logits.argmax(axis=-1) == student_logits.argmax(axis=-1)))


def layer_state_errors(teacher, student, tokens):
    """Relative error of the student's estimated previous states against the teacher's states."""
    teacher_states = forward_stored(tokens, teacher).states
    student_caches = forward_stored(tokens, student).caches
    errors = []
    for j in range(1, student.config.layers):
        p_hat = student_caches[j].p_hat
        truth = teacher_states[j - 1]
        errors.append(float(np.linalg.norm(p_hat - truth) / max(np.linalg.norm(truth), 1e-30)))
    return errors


@attr.s(frozen=True)
class Evaluation:
    kl = attr.ib()
    agreement = attr.ib()
    layer_errors = attr.ib()


def evaluate(teacher, student, batches):
    forward, _ = engine_for(student)
    kls, agreements, errors = [], [], []
    for tokens in batches:
        teacher_logits = forward_stored(tokens, teacher).logits
        student_logits = forward(tokens, student).logits
        kls.append(kl_divergence(student_logits, teacher_logits)[0])
        agreements.append(agreement(teacher_logits, student_logits))
        errors.append(layer_state_errors(teacher, student, tokens))
    return Evaluation(float(np.mean(kls)), float(np.mean(agreements)),
                      [float(e) for e in np.mean(errors, axis=0)])


def _non_negative_floats(instance, attribute, value):
    values = value if isinstance(value, (list, tuple)) else [value]
    for v in values:
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{attribute.name} must be finite and non-negative, got {v!r}")


@attr.s(frozen=True)
class RetrofitReport:
    layer_errors_pre = attr.ib(converter=list, validator=_non_negative_floats)
    layer_errors_post = attr.ib(converter=list, validator=_non_negative_floats)
    kl_pre = attr.ib(validator=_non_negative_floats)
    kl_post = attr.ib(validator=_non_negative_floats)
    agreement_pre = attr.ib(validator=_non_negative_floats)
    agreement_post = attr.ib(validator=_non_negative_floats)
    a_schedule = attr.ib(converter=tuple, default=())
    kl_trace = attr.ib(converter=list, factory=list)

    @property
    def kl_reduction(self):
        if self.kl_pre == 0:
            return 0.0
        return 1.0 - self.kl_post / self.kl_pre


def eval_batches(corpus, config, seq_len, seed):
    rng = Rng(seed, (2,))
    return [sample_batch(corpus.val, config.batch_size, seq_len, rng.child(i))[0]
            for i in range(config.eval_batches)]


@step(title='kl_finetune', args=['seed'])
def kl_finetune(teacher, student, corpus, config, seed=0):
    """Distills the frozen teacher into the student; returns (student, report).

    Only student parameters change; the a-schedule stays fixed.
    """
    if teacher.config.vocab_size != student.config.vocab_size:
        raise InvalidConfigError("teacher and student vocabularies differ")
    seq_len = config.seq_len or student.config.context_length
    held_out = eval_batches(corpus, config, seq_len, seed)
    before = evaluate(teacher, student, held_out)
    log.info("before fine-tuning: KL %.5f, agreement %.4f", before.kl, before.agreement)

    forward, backward = engine_for(student)
    optimizer = AdamWState(AdamWConfig(
        learning_rate=config.kl_learning_rate,
        min_learning_rate=config.kl_learning_rate * 0.1,
        warmup_steps=0,
        max_steps=config.kl_steps,
        weight_decay=0.0,
    ))
    rng = Rng(seed, (3,))
    trace = []
    for i in range(config.kl_steps):
        tokens, _ = sample_batch(corpus.train, config.batch_size, seq_len, rng.child(i))
        teacher_logits = forward_stored(tokens, teacher).logits
        result = forward(tokens, student)
        kl, dlogits = kl_divergence(result.logits, teacher_logits)
        if not np.isfinite(kl):
            raise NonFiniteError(f"non-finite KL at fine-tuning step {i}")
        grads = backward(result, dlogits, student)
        named, _ = optimizer.update(student.named_tensors(), grads.named_tensors())
        student = student.replace_tensors(named)
        trace.append(kl)
        if config.log_interval and (i + 1) % config.log_interval == 0:
            log.info("fine-tuning step %d: KL %.5f", i + 1, kl)

    after = evaluate(teacher, student, held_out)
    log.info("after fine-tuning: KL %.5f, agreement %.4f", after.kl, after.agreement)
    report = RetrofitReport(
        layer_errors_pre=before.layer_errors,
        layer_errors_post=after.layer_errors,
        kl_pre=max(before.kl, 0.0),
        kl_post=max(after.kl, 0.0),
        agreement_pre=before.agreement,
        agreement_post=after.agreement,
        a_schedule=student.config.a_schedule,
        kl_trace=trace,
    )
    return student, report


def write_report_csv(path, report):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['layer', 'err_pre', 'err_post'])
        for j, (pre, post) in enumerate(zip(report.layer_errors_pre, report.layer_errors_post),
                                        start=1):
            writer.writerow([j, repr(pre), repr(post)])


def report_summary(report):
    lines = [
        f"kl_pre={report.kl_pre!r}",
        f"kl_post={report.kl_post!r}",
        f"kl_reduction={report.kl_reduction!r}",
        f"agreement_pre={report.agreement_pre!r}",
        f"agreement_post={report.agreement_post!r}",
        f"a_schedule={','.join(repr(a) for a in report.a_schedule)}",
    ]
    return "\n".join(lines) + "\n"


def write_report_summary(path, report):
    with open(path, 'w') as f:
        f.write(report_summary(report))
