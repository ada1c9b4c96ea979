"""AdamW with linear warmup, cosine decay and global-norm gradient clipping."""
import logging
import math
from collections import OrderedDict

import attr
import numpy as np

from .exceptions import CheckpointError, InvalidConfigError, NonFiniteError

log = logging.getLogger("optim")


def _non_negative(instance, attribute, value):
    if value < 0:
        raise InvalidConfigError(f"{attribute.name} must not be negative, got {value!r}")


@attr.s(frozen=True)
class AdamWConfig:
    learning_rate = attr.ib(default=1e-3, converter=float, validator=_non_negative)
    min_learning_rate = attr.ib(default=1e-4, converter=float, validator=_non_negative)
    warmup_steps = attr.ib(default=100, converter=int, validator=_non_negative)
    max_steps = attr.ib(default=2000, converter=int, validator=_non_negative)
    beta1 = attr.ib(default=0.9, converter=float)
    beta2 = attr.ib(default=0.95, converter=float)
    eps = attr.ib(default=1e-8, converter=float)
    weight_decay = attr.ib(default=0.1, converter=float, validator=_non_negative)
    grad_clip = attr.ib(default=1.0, converter=float, validator=_non_negative)

    def learning_rate_at(self, step):
        """Linear warmup to learning_rate, then cosine decay to min_learning_rate."""
        if step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        if step >= self.max_steps:
            return self.min_learning_rate
        span = max(1, self.max_steps - self.warmup_steps)
        ratio = (step - self.warmup_steps) / span
        coeff = 0.5 * (1.0 + math.cos(math.pi * ratio))
        return self.min_learning_rate + coeff * (self.learning_rate - self.min_learning_rate)


def decays(name, tensor):
    """Weight decay applies to matrices (weights, embeddings) only."""
    return tensor.ndim >= 2


@attr.s(eq=False)
class AdamWState:
    """First/second moments per parameter name and the step counter.

    :meth:`update` advances the state in place and returns fresh tensors.
    """
    config = attr.ib(factory=AdamWConfig)
    step = attr.ib(default=0)
    m = attr.ib(factory=OrderedDict)
    v = attr.ib(factory=OrderedDict)

    def update(self, params, grads):
        if params.keys() != grads.keys():
            raise ValueError("parameter and gradient names differ")
        cfg = self.config
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if not math.isfinite(norm):
            raise NonFiniteError(f"non-finite gradient norm at step {self.step}")
        scale = 1.0
        if cfg.grad_clip and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
        lr = cfg.learning_rate_at(self.step)
        t = self.step + 1
        bias1 = 1.0 - cfg.beta1 ** t
        bias2 = 1.0 - cfg.beta2 ** t
        updated = OrderedDict()
        for name, p in params.items():
            g = grads[name] * scale
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            new = p
            if cfg.weight_decay and decays(name, p):
                new = p * (1.0 - lr * cfg.weight_decay)
            updated[name] = (new - lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)).astype(p.dtype)
        self.step = t
        return updated, norm

    def named_tensors(self):
        named = OrderedDict()
        for name, m in self.m.items():
            named[f"optim.m.{name}"] = m
        for name, v in self.v.items():
            named[f"optim.v.{name}"] = v
        return named

    @classmethod
    def from_named(cls, config, named, step):
        m = OrderedDict()
        v = OrderedDict()
        for key, tensor in named.items():
            if key.startswith("optim.m."):
                m[key[len("optim.m."):]] = tensor
            elif key.startswith("optim.v."):
                v[key[len("optim.v."):]] = tensor
        if m.keys() != v.keys():
            raise CheckpointError("optimizer moments are incomplete")
        return cls(config, step, m, v)
