from .blocks import HamiltonianPair, ModelConfig, TwoStep
from .engine import (
    ActivationLedger, backward_reversible, backward_stored, forward_reversible, forward_stored,
    generate, train_step,
)
from .exceptions import (
    CarrierMismatchError, CheckpointError, CorpusError, DivergenceError, DTypeError,
    InvalidConfigError, NoConfigFoundError, NonFiniteError, NotInvertibleError,
    ReconstructionError, ShapeError, TokenRangeError,
)
from .model import Model, init_model
from .runconfig import RunConfig, load_run_config
from .step import step, steps
from .stepreporter import StepReporter
