"""Transformer sub-blocks and the layer update rules built from them.

Hidden states have shape ``(..., T, d)``; an optional leading batch axis is
carried through every operation. Sub-block functions take the whole
:class:`BlockParams` plus a layer index, mirroring how layers are addressed
by the engine. Each forward function has a ``*_forward`` twin returning a
cache and a ``*_vjp`` consuming it.

The reversible rules all keep a :class:`StateCarrier` and provide

- ``forward(carrier)`` returning the next carrier and the layer cache,
- ``reverse(next_carrier)`` recovering the previous carrier (and cache),
- ``vjp(adjoint_next, cache)`` mapping carrier adjoints one layer back.
"""
import math

import attr
import numpy as np

from .exceptions import InvalidConfigError, NotInvertibleError, ShapeError, TokenRangeError
from .numerics import (
    DTYPES, check_tensor, gelu, gelu_vjp, layer_norm, layer_norm_vjp, linear, linear_vjp,
    softmax_rows, softmax_rows_vjp,
)

BLOCK_KINDS = ('baseline', 'midpoint', 'midpoint_a', 'leapfrog', 'hamiltonian', 'retrofit')
REVERSIBLE_KINDS = tuple(k for k in BLOCK_KINDS if k != 'baseline')
TWO_TERM_KINDS = ('midpoint', 'midpoint_a', 'leapfrog', 'retrofit')
RETROFIT_SKIPS = ('carrier', 'estimate')


def _positive_int(instance, attribute, value):
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise InvalidConfigError(f"{attribute.name} must be a positive integer, got {value!r}")


def _positive_float(instance, attribute, value):
    if not value > 0:
        raise InvalidConfigError(f"{attribute.name} must be positive, got {value!r}")


def _one_of(choices):
    def validator(instance, attribute, value):
        if value not in choices:
            raise InvalidConfigError(
                f"{attribute.name} must be one of {', '.join(choices)}, got {value!r}"
            )
    return validator


def _optional_floats(value):
    if value is None:
        return None
    return tuple(float(v) for v in value)


@attr.s(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``a_schedule`` holds the per-layer coefficients of midpoint_a (one per
    layer) and retrofit (one per layer after the first); it may be left
    unset and is then sampled at model construction from ``a_seed``.
    """
    vocab_size = attr.ib(default=256, validator=_positive_int)
    context_length = attr.ib(default=64, validator=_positive_int)
    width = attr.ib(default=64, validator=_positive_int)
    heads = attr.ib(default=4, validator=_positive_int)
    layers = attr.ib(default=4, validator=_positive_int)
    step_size = attr.ib(default=1.0, converter=float, validator=_positive_float)
    block_kind = attr.ib(default='midpoint', validator=_one_of(BLOCK_KINDS))
    a_schedule = attr.ib(default=None, converter=_optional_floats)
    a_seed = attr.ib(default=0, converter=int)
    hamiltonian_a = attr.ib(default=1.0, converter=float)
    hamiltonian_b = attr.ib(default=1.0, converter=float)
    retrofit_k = attr.ib(default=1, validator=_positive_int)
    retrofit_skip = attr.ib(default='carrier', validator=_one_of(RETROFIT_SKIPS))
    dtype = attr.ib(default='float32', validator=_one_of(tuple(DTYPES)))
    ln_eps = attr.ib(default=1e-5, converter=float, validator=_positive_float)
    init_std = attr.ib(default=0.02, converter=float, validator=_positive_float)

    def __attrs_post_init__(self):
        if self.width % self.heads:
            raise InvalidConfigError(
                f"width {self.width} is not divisible by heads {self.heads}"
            )
        if self.block_kind in TWO_TERM_KINDS and self.layers < 2:
            raise InvalidConfigError(f"{self.block_kind} blocks need at least 2 layers")
        if self.a_schedule is not None:
            expected = self.a_schedule_length
            if expected is not None and len(self.a_schedule) != expected:
                raise InvalidConfigError(
                    f"a_schedule has {len(self.a_schedule)} entries, {self.block_kind} needs {expected}"
                )
            if any(a == 0.0 for a in self.a_schedule):
                raise InvalidConfigError("a_schedule entries must be non-zero")
        if self.block_kind == 'hamiltonian':
            if not math.isclose(abs(self.hamiltonian_a * self.hamiltonian_b), 1.0,
                                rel_tol=0.0, abs_tol=1e-12):
                raise InvalidConfigError("hamiltonian coefficients need |a*b| = 1")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def reversible(self):
        if self.block_kind == 'retrofit' and self.retrofit_skip == 'estimate':
            return False
        return self.block_kind in REVERSIBLE_KINDS

    @property
    def a_schedule_length(self):
        if self.block_kind == 'midpoint_a':
            return self.layers
        if self.block_kind == 'retrofit':
            return self.layers - 1
        return None


@attr.s(eq=False)
class LayerParams:
    ln1_gain = attr.ib()
    ln1_bias = attr.ib()
    w_q = attr.ib()
    w_k = attr.ib()
    w_v = attr.ib()
    w_o = attr.ib()
    ln2_gain = attr.ib()
    ln2_bias = attr.ib()
    w_1 = attr.ib()
    b_1 = attr.ib()
    w_2 = attr.ib()
    b_2 = attr.ib()

    @classmethod
    def names(cls):
        return [a.name for a in attr.fields(cls)]

    def zeros_like(self):
        return LayerParams(**{k: np.zeros_like(v) for k, v in attr.asdict(self, recurse=False).items()})

    def check_shapes(self, config):
        d = config.width
        expected = {
            'ln1_gain': (d,), 'ln1_bias': (d,),
            'w_q': (d, d), 'w_k': (d, d), 'w_v': (d, d), 'w_o': (d, d),
            'ln2_gain': (d,), 'ln2_bias': (d,),
            'w_1': (d, 4 * d), 'b_1': (4 * d,), 'w_2': (4 * d, d), 'b_2': (d,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ShapeError(f"layer parameter {name} has shape {value.shape}, expected {shape}")


@attr.s(eq=False)
class BlockParams:
    layers = attr.ib(validator=attr.validators.instance_of(list))

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, index):
        return self.layers[index]

    def zeros_like(self):
        return BlockParams([lp.zeros_like() for lp in self.layers])


@attr.s(eq=False)
class EmbeddingParams:
    """Token table (V×d), positional table (T×d) and output projection (d×V)."""
    token = attr.ib()
    position = attr.ib()
    projection = attr.ib()

    @classmethod
    def names(cls):
        return [a.name for a in attr.fields(cls)]

    def zeros_like(self):
        return EmbeddingParams(np.zeros_like(self.token), np.zeros_like(self.position),
                               np.zeros_like(self.projection))

    def check_shapes(self, config):
        V, T, d = config.vocab_size, config.context_length, config.width
        for name, shape in (('token', (V, d)), ('position', (T, d)), ('projection', (d, V))):
            if getattr(self, name).shape != shape:
                raise ShapeError(
                    f"embedding parameter {name} has shape {getattr(self, name).shape}, expected {shape}"
                )


def _check_pair(first, second, names):
    if first.shape != second.shape or first.dtype != second.dtype:
        raise ShapeError(
            f"carrier members {names[0]} {first.shape}/{first.dtype} and "
            f"{names[1]} {second.shape}/{second.dtype} differ"
        )


@attr.s(frozen=True, eq=False)
class TwoStep:
    """(p⁽ℓ⁻¹⁾, p⁽ℓ⁾), the state kept by two-term recurrences."""
    p_prev = attr.ib()
    p_cur = attr.ib()

    def __attrs_post_init__(self):
        _check_pair(self.p_prev, self.p_cur, ('p_prev', 'p_cur'))

    @property
    def output(self):
        return self.p_cur

    def tensors(self):
        return (self.p_prev, self.p_cur)

    def output_adjoint(self, g_out):
        return TwoStep(np.zeros_like(g_out), g_out)

    def total(self):
        return self.p_prev + self.p_cur


@attr.s(frozen=True, eq=False)
class HamiltonianPair:
    """(p⁽ℓ⁾, q⁽ℓ⁾), position and momentum of the staggered update."""
    p = attr.ib()
    q = attr.ib()

    def __attrs_post_init__(self):
        _check_pair(self.p, self.q, ('p', 'q'))

    @property
    def output(self):
        return self.p

    def tensors(self):
        return (self.p, self.q)

    def output_adjoint(self, g_out):
        return HamiltonianPair(g_out, np.zeros_like(g_out))

    def total(self):
        return self.p + self.q


#: Type alias used in signatures and docs.
StateCarrier = (TwoStep, HamiltonianPair)


def carrier_dtype(config):
    """Reversible carriers are float64 even for float32 parameters.

    Layers still compute in ``config.dtype``, see :func:`layer_input`.
    """
    if config.block_kind in REVERSIBLE_KINDS:
        return np.dtype(np.float64)
    return np.dtype(config.dtype)


def layer_input(p, config):
    """A carrier member cast to the parameter dtype."""
    return p.astype(config.dtype, copy=False)


def initial_carrier(p0, config):
    """Duplicates the embedding output into both carrier members."""
    p0 = p0.astype(carrier_dtype(config), copy=False)
    if config.block_kind == 'hamiltonian':
        return HamiltonianPair(p0, p0)
    return TwoStep(p0, p0)


def state_norm(carrier):
    return max(float(np.linalg.norm(t)) for t in carrier.tensors())


def as_tokens(tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise ShapeError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TokenRangeError(f"tokens must be integers, got {tokens.dtype}")
    return tokens


def embed(tokens, emb):
    """p⁽⁰⁾ = E[tokens] + P[:t] for a sequence (t,) or batch (B, t) of tokens."""
    tokens = as_tokens(tokens)
    vocab = emb.token.shape[0]
    length = tokens.shape[-1]
    if length > emb.position.shape[0]:
        raise ShapeError(
            f"sequence of length {length} exceeds context length {emb.position.shape[0]}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise TokenRangeError(f"token out of range [0, {vocab})")
    return emb.token[tokens] + emb.position[:length]


def embed_vjp(g, tokens, grads):
    """Accumulates dE and dP for upstream g (..., t, d) into grads (EmbeddingParams)."""
    d = g.shape[-1]
    length = tokens.shape[-1]
    np.add.at(grads.token, tokens.reshape(-1), g.reshape(-1, d))
    grads.position[:length] += g.reshape(-1, length, d).sum(axis=0)


def project_logits(p, emb):
    """Vocabulary logits p·W; softmax is left to the loss."""
    return linear(p, emb.projection)


def causal_mask(length):
    return np.tril(np.ones((length, length), dtype=bool))


def _split_heads(x, heads):
    *lead, t, d = x.shape
    return np.swapaxes(x.reshape(*lead, t, heads, d // heads), -3, -2)


def _merge_heads(x):
    x = np.swapaxes(x, -3, -2)
    *lead, t, heads, hd = x.shape
    return x.reshape(*lead, t, heads * hd)


def _check_state(p, config, what):
    p = check_tensor(p, what)
    if p.ndim < 2 or p.shape[-1] != config.width:
        raise ShapeError(f"{what} has shape {p.shape}, expected (..., T, {config.width})")
    return p


@attr.s(eq=False)
class AttnCache:
    p = attr.ib()
    x = attr.ib()
    q = attr.ib()
    k = attr.ib()
    v = attr.ib()
    probs = attr.ib()
    context = attr.ib()

    def tensors(self):
        return (self.x, self.q, self.k, self.v, self.probs, self.context)


@attr.s(eq=False)
class MlpCache:
    z = attr.ib()
    x = attr.ib()
    hidden_pre = attr.ib()
    hidden = attr.ib()

    def tensors(self):
        return (self.z, self.x, self.hidden_pre, self.hidden)


@attr.s(eq=False)
class LayerCache:
    attn = attr.ib()
    mlp = attr.ib()

    def tensors(self):
        return self.attn.tensors() + self.mlp.tensors()


def attn_forward(p, params, layer, config):
    p = _check_state(p, config, "attention input")
    lp = params[layer]
    heads = config.heads
    x = layer_norm(p, lp.ln1_gain, lp.ln1_bias, config.ln_eps)
    q = _split_heads(linear(x, lp.w_q), heads)
    k = _split_heads(linear(x, lp.w_k), heads)
    v = _split_heads(linear(x, lp.w_v), heads)
    scale = 1.0 / math.sqrt(config.head_dim)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    probs = softmax_rows(scores, mask=causal_mask(p.shape[-2]))
    context = _merge_heads(probs @ v)
    out = linear(context, lp.w_o)
    return out, AttnCache(p, x, q, k, v, probs, context)


def attn_block(p, params, layer, config):
    """Causal multi-head self-attention of LN₁(p), without the residual add."""
    return attn_forward(p, params, layer, config)[0]


def attn_vjp(g, cache, params, layer, config, grads):
    lp = params[layer]
    heads = config.heads
    dcontext, dw_o, _ = linear_vjp(g, cache.context, lp.w_o)
    grads.w_o += dw_o
    dctx = _split_heads(dcontext, heads)
    dprobs = dctx @ np.swapaxes(cache.v, -1, -2)
    dv = np.swapaxes(cache.probs, -1, -2) @ dctx
    dscores = softmax_rows_vjp(dprobs, cache.probs) * (1.0 / math.sqrt(config.head_dim))
    dq = dscores @ cache.k
    dk = np.swapaxes(dscores, -1, -2) @ cache.q
    dx = 0.0
    for name, d in (('w_q', dq), ('w_k', dk), ('w_v', dv)):
        dxi, dw, _ = linear_vjp(_merge_heads(d), cache.x, getattr(lp, name))
        getattr(grads, name)[...] += dw
        dx = dx + dxi
    dp, dgain, dbias = layer_norm_vjp(dx, cache.p, lp.ln1_gain, config.ln_eps)
    grads.ln1_gain += dgain
    grads.ln1_bias += dbias
    return dp


def mlp_forward(z, params, layer, config):
    z = _check_state(z, config, "mlp input")
    lp = params[layer]
    x = layer_norm(z, lp.ln2_gain, lp.ln2_bias, config.ln_eps)
    hidden_pre = linear(x, lp.w_1, lp.b_1)
    hidden = gelu(hidden_pre)
    out = linear(hidden, lp.w_2, lp.b_2)
    return out, MlpCache(z, x, hidden_pre, hidden)


def mlp_block(x, params, layer, config):
    """W₂·gelu(W₁·LN₂(x) + b₁) + b₂ rowwise, without the residual add."""
    return mlp_forward(x, params, layer, config)[0]


def mlp_vjp(g, cache, params, layer, config, grads):
    lp = params[layer]
    dhidden, dw_2, db_2 = linear_vjp(g, cache.hidden, lp.w_2)
    grads.w_2 += dw_2
    grads.b_2 += db_2
    dpre = gelu_vjp(dhidden, cache.hidden_pre)
    dx, dw_1, db_1 = linear_vjp(dpre, cache.x, lp.w_1)
    grads.w_1 += dw_1
    grads.b_1 += db_1
    dz, dgain, dbias = layer_norm_vjp(dx, cache.z, lp.ln2_gain, config.ln_eps)
    grads.ln2_gain += dgain
    grads.ln2_bias += dbias
    return dz


def layer_fn_forward(p, params, layer, config):
    a, attn_cache = attn_forward(p, params, layer, config)
    m, mlp_cache = mlp_forward(p + a, params, layer, config)
    return a + m, LayerCache(attn_cache, mlp_cache)


def layer_fn(p, params, layer, config):
    """f(p) = Attn(LN₁(p)) + MLP(LN₂(p + Attn(LN₁(p))))."""
    return layer_fn_forward(p, params, layer, config)[0]


def layer_fn_vjp(g, cache, params, layer, config, grads):
    """Returns df/dp applied to g, accumulating parameter gradients of layer into grads."""
    dz = mlp_vjp(g, cache.mlp, params, layer, config, grads)
    da = g + dz
    return dz + attn_vjp(da, cache.attn, params, layer, config, grads)


def baseline_step(p, params, layer, config):
    """The residual transformer block: q = p + Attn(p); p' = q + MLP(q)."""
    q = p + attn_block(p, params, layer, config)
    return q + mlp_block(q, params, layer, config)


@attr.s(frozen=True)
class TwoTermRule:
    """p_next = alpha·p_prev + beta·p_cur + update(p_cur).

    Subclasses define the update term; reversibility requires alpha != 0.
    """
    layer = attr.ib()

    @property
    def alpha(self):
        raise NotImplementedError

    @property
    def beta(self):
        raise NotImplementedError

    def update(self, p_cur, params, config):
        raise NotImplementedError

    def update_vjp(self, g, cache, params, config, grads):
        raise NotImplementedError

    def forward(self, carrier, params, config):
        u, cache = self.update(layer_input(carrier.p_cur, config), params, config)
        p_next = self.alpha * carrier.p_prev + self.beta * carrier.p_cur + u
        return TwoStep(carrier.p_cur, p_next), cache

    def reverse(self, carrier, params, config):
        if self.alpha == 0.0:
            raise NotInvertibleError(f"layer {self.layer} update is not invertible (alpha = 0)")
        u, cache = self.update(layer_input(carrier.p_prev, config), params, config)
        p_prev = (carrier.p_cur - self.beta * carrier.p_prev - u) / self.alpha
        return TwoStep(p_prev, carrier.p_prev), cache

    def vjp(self, adjoint, cache, params, config, grads):
        """Maps adjoints of (p_cur, p_next) to adjoints of (p_prev, p_cur)."""
        g_next = adjoint.p_cur
        g_cur = adjoint.p_prev + self.beta * g_next + self.update_vjp(
            g_next, cache, params, config, grads)
        return TwoStep(self.alpha * g_next, g_cur)

    def step(self, carrier, params, config):
        return self.forward(carrier, params, config)[0]

    def inverse(self, carrier, params, config):
        return self.reverse(carrier, params, config)[0]


@attr.s(frozen=True)
class LayerRule(TwoTermRule):
    """Two-term rule whose update is gamma·f(p_cur) for a single layer."""
    coefficients = attr.ib()

    @property
    def alpha(self):
        return self.coefficients[0]

    @property
    def beta(self):
        return self.coefficients[1]

    @property
    def gamma(self):
        return self.coefficients[2]

    def update(self, p_cur, params, config):
        f, cache = layer_fn_forward(p_cur, params, self.layer, config)
        return self.gamma * f, cache

    def update_vjp(self, g, cache, params, config, grads):
        return layer_fn_vjp(self.gamma * g, cache, params, self.layer, config,
                            grads[self.layer])


def residual_rule(layer):
    return LayerRule(layer, (0.0, 1.0, 1.0))


def midpoint_rule(layer, h):
    return LayerRule(layer, (1.0, 0.0, 2.0 * h))


def midpoint_a_rule(layer, h, a):
    if a == 0:
        raise NotInvertibleError("midpoint_a coefficient a = 0 is not invertible")
    return LayerRule(layer, (float(a), 1.0 - a, float(h)))


def leapfrog_rule(layer, h):
    return LayerRule(layer, (-1.0, 2.0, float(h) * h))


def midpoint_step(carrier, params, layer, h, config):
    """p_next = p_prev + 2h·f(p_cur)."""
    return midpoint_rule(layer, h).step(carrier, params, config)


def midpoint_inverse(carrier, params, layer, h, config):
    return midpoint_rule(layer, h).inverse(carrier, params, config)


def midpoint_a_step(carrier, params, layer, h, a, config):
    """p_next = a·p_prev + (1−a)·p_cur + h·f(p_cur)."""
    return midpoint_a_rule(layer, h, a).step(carrier, params, config)


def midpoint_a_inverse(carrier, params, layer, h, a, config):
    return midpoint_a_rule(layer, h, a).inverse(carrier, params, config)


def leapfrog_step(carrier, params, layer, h, config):
    """p_next = 2·p_cur − p_prev + h²·f(p_cur)."""
    return leapfrog_rule(layer, h).step(carrier, params, config)


def leapfrog_inverse(carrier, params, layer, h, config):
    return leapfrog_rule(layer, h).inverse(carrier, params, config)


@attr.s(frozen=True)
class HamiltonianRule:
    """q' = a·q + Attn(p); p' = b·p + MLP(q')."""
    layer = attr.ib()
    a = attr.ib(default=1.0)
    b = attr.ib(default=1.0)

    def forward(self, pair, params, config):
        attn_out, attn_cache = attn_forward(layer_input(pair.p, config), params, self.layer, config)
        q_new = self.a * pair.q + attn_out
        mlp_out, mlp_cache = mlp_forward(layer_input(q_new, config), params, self.layer, config)
        p_new = self.b * pair.p + mlp_out
        return HamiltonianPair(p_new, q_new), LayerCache(attn_cache, mlp_cache)

    def reverse(self, pair, params, config):
        mlp_out, mlp_cache = mlp_forward(layer_input(pair.q, config), params, self.layer, config)
        p = (pair.p - mlp_out) / self.b
        attn_out, attn_cache = attn_forward(layer_input(p, config), params, self.layer, config)
        q = (pair.q - attn_out) / self.a
        return HamiltonianPair(p, q), LayerCache(attn_cache, mlp_cache)

    def vjp(self, adjoint, cache, params, config, grads):
        layer_grads = grads[self.layer]
        gq_new = adjoint.q + mlp_vjp(adjoint.p, cache.mlp, params, self.layer, config, layer_grads)
        gp = self.b * adjoint.p + attn_vjp(gq_new, cache.attn, params, self.layer, config,
                                           layer_grads)
        return HamiltonianPair(gp, self.a * gq_new)

    def step(self, pair, params, config):
        return self.forward(pair, params, config)[0]

    def inverse(self, pair, params, config):
        return self.reverse(pair, params, config)[0]


def hamiltonian_step(pair, params, layer, config):
    return HamiltonianRule(layer, config.hamiltonian_a, config.hamiltonian_b).step(
        pair, params, config)


def hamiltonian_inverse(pair, params, layer, config):
    return HamiltonianRule(layer, config.hamiltonian_a, config.hamiltonian_b).inverse(
        pair, params, config)


def rules_for(config):
    """Returns the per-layer update rules of a model configuration."""
    kind = config.block_kind
    h = config.step_size
    layers = range(config.layers)
    if kind == 'baseline':
        return [residual_rule(i) for i in layers]
    if kind == 'midpoint':
        return [midpoint_rule(i, h) for i in layers]
    if kind == 'leapfrog':
        return [leapfrog_rule(i, h) for i in layers]
    if kind == 'hamiltonian':
        return [HamiltonianRule(i, config.hamiltonian_a, config.hamiltonian_b) for i in layers]
    if config.a_schedule is None:
        raise InvalidConfigError(f"{kind} blocks need an a_schedule")
    if kind == 'midpoint_a':
        return [midpoint_a_rule(i, h, a) for i, a in zip(layers, config.a_schedule)]
    from .retrofit import RetrofitRule

    rules = [LayerRule(0, (1.0, 0.0, h))]
    for j in range(1, config.layers):
        rules.append(RetrofitRule(j, config.a_schedule[j - 1], config.retrofit_k, h,
                                  config.retrofit_skip))
    return rules
