"""Unit-wise Fisher information and natural-gradient descent for random nets."""

__version__ = "0.1.0"

from .activations import ActivationKind
from .nets import (
    ConfigError,
    ForwardTrace,
    NetConfig,
    NetworkParams,
    ResNetConfig,
    forward,
    forward_resnet,
    init_mixers,
    init_random,
)
from .meanfield import MeanFieldTrace, monte_carlo, propagate, propagate_resnet
from .unit_fisher import (
    SingularFisher,
    UnitFisherCoeffs,
    UnitWeights,
    apply_Ginv,
    assemble_G,
    unit_coeffs,
)
from .fisher_probe import block_decay_scan, domino_check, estimate_fisher
from .trainer import (
    NumericalError,
    OptimizerConfig,
    TeacherStudentTask,
    TrainRecord,
    sgd_step,
    train,
    train_resnet,
    unit_ngd_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
