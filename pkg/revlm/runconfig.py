"""The validated options of a run and their ``key=value`` text form."""
import logging
import os

import attr

from .blocks import BLOCK_KINDS, RETROFIT_SKIPS, ModelConfig
from .config import Config
from .exceptions import InvalidConfigError
from .numerics import DTYPES
from .optim import AdamWConfig
from .retrofit import A_MODES, RetrofitConfig
from .util import unknown_keys

log = logging.getLogger("runconfig")

ENGINES = ('auto', 'reversible', 'stored')
TOKENIZERS = ('byte', 'char')


def _optional_str(value):
    if value is None or value == '' or value == 'none':
        return None
    return str(value)


def _optional_floats(value):
    """None, a sequence of numbers or comma separated text."""
    if value is None or value == '' or value == 'none':
        return None
    if isinstance(value, str):
        value = [v for v in value.split(',') if v.strip()]
    values = tuple(float(v) for v in value)
    if any(v == 0.0 for v in values):
        raise InvalidConfigError("a_schedule entries must be non-zero")
    return values


def _choice(choices):
    return attr.validators.in_(choices)


@attr.s(frozen=True)
class RunConfig:
    """Every option of train, eval, retrofit and the verification commands.

    Options are flat; in YAML files they are grouped into the ``model``,
    ``optim``, ``run`` and ``retrofit`` sections.
    """
    # model
    block_kind = attr.ib(default='midpoint', validator=_choice(BLOCK_KINDS))
    context_length = attr.ib(default=64, converter=int)
    width = attr.ib(default=64, converter=int)
    heads = attr.ib(default=4, converter=int)
    layers = attr.ib(default=4, converter=int)
    step_size = attr.ib(default=1.0, converter=float)
    a_schedule = attr.ib(default=None, converter=_optional_floats)
    a_seed = attr.ib(default=0, converter=int)
    hamiltonian_a = attr.ib(default=1.0, converter=float)
    hamiltonian_b = attr.ib(default=1.0, converter=float)
    retrofit_k = attr.ib(default=1, converter=int)
    retrofit_skip = attr.ib(default='carrier', validator=_choice(RETROFIT_SKIPS))
    dtype = attr.ib(default='float32', validator=_choice(tuple(DTYPES)))
    init_std = attr.ib(default=0.02, converter=float)
    # optim
    learning_rate = attr.ib(default=1e-3, converter=float)
    min_learning_rate = attr.ib(default=1e-4, converter=float)
    warmup_steps = attr.ib(default=100, converter=int)
    max_steps = attr.ib(default=2000, converter=int)
    weight_decay = attr.ib(default=0.1, converter=float)
    grad_clip = attr.ib(default=1.0, converter=float)
    beta1 = attr.ib(default=0.9, converter=float)
    beta2 = attr.ib(default=0.95, converter=float)
    # run
    seed = attr.ib(default=0, converter=int)
    batch_size = attr.ib(default=16, converter=int)
    eval_interval = attr.ib(default=100, converter=int)
    eval_batches = attr.ib(default=8, converter=int)
    checkpoint_interval = attr.ib(default=500, converter=int)
    log_interval = attr.ib(default=10, converter=int)
    data = attr.ib(default=None, converter=_optional_str)
    out = attr.ib(default='out', converter=str)
    tokenizer = attr.ib(default='byte', validator=_choice(TOKENIZERS))
    engine = attr.ib(default='auto', validator=_choice(ENGINES))
    val_fraction = attr.ib(default=0.1, converter=float)
    # retrofit
    a_mode = attr.ib(default='random', validator=_choice(A_MODES))
    kl_steps = attr.ib(default=200, converter=int)
    kl_learning_rate = attr.ib(default=1e-4, converter=float)

    def __attrs_post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise InvalidConfigError("val_fraction must lie in (0, 1)")
        # model and optimizer options are validated by their own types
        self.model_config(256)
        self.optim_config()

    @classmethod
    def from_mapping(cls, mapping):
        unknown = unknown_keys(mapping, cls)
        if unknown:
            raise InvalidConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            return cls(**mapping)
        except (TypeError, ValueError) as e:
            raise InvalidConfigError(f"invalid configuration value: {e}") from e

    @classmethod
    def from_text(cls, text):
        mapping = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key, sep, value = line.partition('=')
            if not sep:
                raise InvalidConfigError(f"line {number}: expected key=value, got '{line}'")
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    def to_text(self):
        lines = []
        for field in attr.fields(type(self)):
            value = getattr(self, field.name)
            if value is None:
                value = ''
            elif isinstance(value, float):
                value = repr(value)
            elif isinstance(value, tuple):
                value = ','.join(repr(v) for v in value)
            lines.append(f"{field.name}={value}")
        return "\n".join(lines) + "\n"

    def model_config(self, vocab_size):
        """Kinds without per-layer coefficients drop ``a_schedule``."""
        config = ModelConfig(
            vocab_size=vocab_size,
            context_length=self.context_length,
            width=self.width,
            heads=self.heads,
            layers=self.layers,
            step_size=self.step_size,
            block_kind=self.block_kind,
            a_seed=self.a_seed,
            hamiltonian_a=self.hamiltonian_a,
            hamiltonian_b=self.hamiltonian_b,
            retrofit_k=self.retrofit_k,
            retrofit_skip=self.retrofit_skip,
            dtype=self.dtype,
            init_std=self.init_std,
        )
        if config.a_schedule_length is None:
            return config
        return attr.evolve(config, a_schedule=self.a_schedule)

    def optim_config(self):
        return AdamWConfig(
            learning_rate=self.learning_rate,
            min_learning_rate=self.min_learning_rate,
            warmup_steps=self.warmup_steps,
            max_steps=self.max_steps,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
        )

    def retrofit_config(self):
        return RetrofitConfig(
            k_fixed_point=self.retrofit_k,
            a_mode=self.a_mode,
            a_schedule=self.a_schedule,
            a_seed=self.a_seed,
            skip=self.retrofit_skip,
            step_size=self.step_size,
            kl_steps=self.kl_steps,
            kl_learning_rate=self.kl_learning_rate,
            batch_size=self.batch_size,
            eval_batches=self.eval_batches,
            log_interval=self.log_interval,
        )


def load_run_config(filename=None, overrides=None, environ=None):
    """Defaults, then the YAML file, then overrides; REVLM_SEED fills an unset seed."""
    environ = os.environ if environ is None else environ
    options = {}
    if filename:
        options.update(Config(filename).options())
    for key, value in (overrides or {}).items():
        if value is not None:
            options[key] = value
    if 'seed' not in options and environ.get('REVLM_SEED'):
        options['seed'] = environ['REVLM_SEED']
    config = RunConfig.from_mapping(options)
    log.debug("run configuration:\n%s", config.to_text())
    return config
