"""Dense tensor primitives with hand-written vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 or float64.
Every primitive checks its inputs at the boundary and raises
:class:`~revlm.exceptions.ShapeError`, :class:`~revlm.exceptions.DTypeError`
or :class:`~revlm.exceptions.NonFiniteError` instead of propagating
garbage. Each ``*_vjp`` function maps an upstream gradient back onto the
inputs of its primitive; no tape or graph is kept.
"""
import math

import attr
import numpy as np

from .exceptions import DTypeError, NonFiniteError, ShapeError, TokenRangeError

DTYPES = {
    'float32': np.float32,
    'float64': np.float64,
}

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def as_dtype(name):
    """Returns the numpy dtype for a dtype name ('float32' or 'float64')."""
    try:
        return np.dtype(DTYPES[name])
    except KeyError:
        raise DTypeError(f"unsupported dtype '{name}' (use one of {sorted(DTYPES)})") from None


def check_tensor(x, name="tensor"):
    """Validates dtype and finiteness of x and returns it as an ndarray."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        raise DTypeError(f"{name} has dtype {x.dtype}, expected float32 or float64")
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


def _check_same_dtype(a, b, what):
    if a.dtype != b.dtype:
        raise DTypeError(f"{what}: dtype mismatch {a.dtype} vs {b.dtype}")


def matmul(a, b):
    """Matrix product of a (m×k) and b (k×n)."""
    a = check_tensor(a, "matmul lhs")
    b = check_tensor(b, "matmul rhs")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_same_dtype(a, b, "matmul")
    return a @ b


def matmul_vjp(g, a, b):
    """Returns (g·bᵀ, aᵀ·g), the gradients of matmul(a, b) for upstream g."""
    return g @ b.T, a.T @ g


def linear(x, w, b=None):
    """Applies x (...×k) · w (k×n) + b (n) over the leading axes of x."""
    x = check_tensor(x, "linear input")
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
    _check_same_dtype(x, w, "linear")
    out = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not fit weight {w.shape}")
        out = out + b
    return out


def linear_vjp(g, x, w):
    """Returns (dx, dw, db) for out = linear(x, w, b)."""
    k, n = w.shape
    dx = g @ w.T
    g2 = g.reshape(-1, n)
    dw = x.reshape(-1, k).T @ g2
    db = g2.sum(axis=0)
    return dx, dw, db


def softmax_rows(x, mask=None):
    """Softmax over the last axis with per-row max subtraction.

    Entries where the boolean mask is False get probability zero.
    """
    x = check_tensor(x, "softmax input")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_vjp(g, y):
    """Applies the softmax Jacobian at output y to the upstream gradient g."""
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def log_softmax_rows(x):
    x = check_tensor(x, "log_softmax input")
    m = x.max(axis=-1, keepdims=True)
    return x - (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))


def _check_norm_params(x, gain, bias, eps):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: last dimension {d} does not match gain {gain.shape} / bias {bias.shape}"
        )
    if not eps > 0:
        raise ValueError("layer_norm eps must be positive")


def _normalize(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    return centered * rstd, rstd


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row zero-mean unit-variance normalization followed by gain and bias."""
    x = check_tensor(x, "layer_norm input")
    _check_norm_params(x, gain, bias, eps)
    xhat, _ = _normalize(x, eps)
    return xhat * gain + bias


def layer_norm_vjp(g, x, gain, eps=1e-5):
    """Returns (dx, dgain, dbias) for y = layer_norm(x, gain, bias, eps)."""
    d = x.shape[-1]
    xhat, rstd = _normalize(x, eps)
    dgain = (g * xhat).reshape(-1, d).sum(axis=0)
    dbias = g.reshape(-1, d).sum(axis=0)
    dxhat = g * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(x):
    """Tanh approximation of GELU, elementwise."""
    x = check_tensor(x, "gelu input")
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_K * x**3)))


def gelu_vjp(g, x):
    t = np.tanh(GELU_C * (x + GELU_K * x**3))
    du = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _check_targets(logits, targets):
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise TokenRangeError(f"targets must be integers, got {targets.dtype}")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenRangeError(f"target out of range [0, {vocab})")
    return targets


def cross_entropy(logits, targets):
    """Mean next-token cross-entropy and its gradient with respect to logits.

    Returns (loss, dlogits) where dlogits = (softmax - onehot) / N over the
    N target positions.
    """
    logits = check_tensor(logits, "logits")
    targets = _check_targets(logits, targets)
    vocab = logits.shape[-1]
    flat = logits.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    n = flat_targets.size
    logp = log_softmax_rows(flat)
    rows = np.arange(n)
    loss = -logp[rows, flat_targets].mean()
    grad = np.exp(logp)
    grad[rows, flat_targets] -= 1.0
    grad /= n
    return float(loss), grad.reshape(logits.shape)


def kl_divergence(student_logits, teacher_logits):
    """Position-averaged KL(student ‖ teacher) and its gradient on the student logits."""
    student_logits = check_tensor(student_logits, "student logits")
    teacher_logits = check_tensor(teacher_logits, "teacher logits")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"kl_divergence: shapes differ {student_logits.shape} vs {teacher_logits.shape}"
        )
    n = int(np.prod(student_logits.shape[:-1]))
    ls = log_softmax_rows(student_logits)
    lt = log_softmax_rows(teacher_logits)
    ps = np.exp(ls)
    diff = ls - lt
    per_position = (ps * diff).sum(axis=-1, keepdims=True)
    grad = ps * (diff - per_position) / n
    return float(per_position.sum() / n), grad


def relative_error(a, b):
    """Max-norm relative difference of two tensors, safe for zero references."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-30)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@attr.s(eq=False)
class Rng:
    """Deterministic random stream.

    The generator is numpy's PCG64 seeded through a SeedSequence built from
    ``seed`` and an optional ``key`` path, so identical seeds produce
    identical streams on every platform. :meth:`child` derives independent
    streams, e.g. one per training step or Monte Carlo worker.
    """
    algorithm = 'PCG64'

    seed = attr.ib(converter=int)
    key = attr.ib(default=(), converter=tuple)

    def __attrs_post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *keys):
        return Rng(self.seed, self.key + tuple(int(k) for k in keys))

    def normal(self, shape, std=1.0, dtype='float64'):
        return (self.generator.standard_normal(shape) * std).astype(as_dtype(dtype))

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size)
