"""The parameter bundle of a model and its named-tensor views."""
import logging
from collections import OrderedDict

import attr
import numpy as np

from .blocks import BlockParams, EmbeddingParams, LayerParams, ModelConfig, rules_for
from .exceptions import CheckpointError
from .numerics import Rng, as_dtype
from .stability import sample_a

log = logging.getLogger("model")


class ParameterTree:
    """Mixin for bundles holding ``embedding`` and ``blocks`` tensors.

    Tensor names are ``embedding.<field>`` and ``layers.<i>.<field>``; the
    order is fixed so optimizers and checkpoints iterate deterministically.
    """

    def named_tensors(self):
        named = OrderedDict()
        for name in EmbeddingParams.names():
            named[f"embedding.{name}"] = getattr(self.embedding, name)
        for i, layer in enumerate(self.blocks.layers):
            for name in LayerParams.names():
                named[f"layers.{i}.{name}"] = getattr(layer, name)
        return named

    def parameter_count(self):
        return sum(t.size for t in self.named_tensors().values())


def _tree_from_named(named, layers):
    try:
        embedding = EmbeddingParams(**{
            name: named[f"embedding.{name}"] for name in EmbeddingParams.names()
        })
        blocks = BlockParams([
            LayerParams(**{name: named[f"layers.{i}.{name}"] for name in LayerParams.names()})
            for i in range(layers)
        ])
    except KeyError as e:
        raise CheckpointError(f"missing tensor {e.args[0]}") from None
    return embedding, blocks


@attr.s(eq=False)
class Model(ParameterTree):
    config = attr.ib(validator=attr.validators.instance_of(ModelConfig))
    embedding = attr.ib(validator=attr.validators.instance_of(EmbeddingParams))
    blocks = attr.ib(validator=attr.validators.instance_of(BlockParams))

    def __attrs_post_init__(self):
        if len(self.blocks) != self.config.layers:
            raise CheckpointError(
                f"model has {len(self.blocks)} layers, config says {self.config.layers}"
            )
        self.embedding.check_shapes(self.config)
        for layer in self.blocks.layers:
            layer.check_shapes(self.config)
        self._rules = rules_for(self.config)

    @property
    def dtype(self):
        return self.embedding.token.dtype

    def rules(self):
        return self._rules

    @classmethod
    def from_named(cls, config, named):
        embedding, blocks = _tree_from_named(named, config.layers)
        return cls(config, embedding, blocks)

    def replace_tensors(self, named):
        """Returns a new model sharing this config with the given tensors."""
        return Model.from_named(self.config, named)

    def copy(self, **changes):
        """Deep copy of the tensors, optionally with config changes."""
        config = attr.evolve(self.config, **changes) if changes else self.config
        named = OrderedDict((k, v.copy()) for k, v in self.named_tensors().items())
        return Model.from_named(config, named)


def sample_a_schedule(config):
    """Draws the frozen per-layer coefficients for midpoint_a and retrofit models."""
    n = config.a_schedule_length
    if n is None:
        return None
    return tuple(float(a) for a in sample_a(Rng(config.a_seed, (0,)), n))


def init_layer(config, rng):
    d = config.width
    dtype = as_dtype(config.dtype)
    std = config.init_std

    def weight(i, shape):
        return rng.child(i).normal(shape, std, config.dtype)

    return LayerParams(
        ln1_gain=np.ones(d, dtype), ln1_bias=np.zeros(d, dtype),
        w_q=weight(0, (d, d)), w_k=weight(1, (d, d)), w_v=weight(2, (d, d)), w_o=weight(3, (d, d)),
        ln2_gain=np.ones(d, dtype), ln2_bias=np.zeros(d, dtype),
        w_1=weight(4, (d, 4 * d)), b_1=np.zeros(4 * d, dtype),
        w_2=weight(5, (4 * d, d)), b_2=np.zeros(d, dtype),
    )


def init_model(config, seed=0):
    """Creates a model with N(0, init_std) weights, zero biases and unit gains.

    Each tensor draws from its own child stream of ``seed`` so models of
    different depth share their leading layers.
    """
    if config.a_schedule is None and config.a_schedule_length is not None:
        config = attr.evolve(config, a_schedule=sample_a_schedule(config))
    rng = Rng(seed)
    V, T, d = config.vocab_size, config.context_length, config.width
    embedding = EmbeddingParams(
        token=rng.child(0, 0).normal((V, d), config.init_std, config.dtype),
        position=rng.child(0, 1).normal((T, d), config.init_std, config.dtype),
        projection=rng.child(0, 2).normal((d, V), config.init_std, config.dtype),
    )
    blocks = BlockParams([init_layer(config, rng.child(1, i)) for i in range(config.layers)])
    model = Model(config, embedding, blocks)
    log.debug("initialized %s model: %d layers, %d parameters", config.block_kind,
              config.layers, model.parameter_count())
    return model
