"""Desk-scale federated-learning testbed for active gradient-inversion
attacks and client-side manipulation detectors."""

from .exceptions import (
    AttackError,
    ConfigError,
    DomainError,
    GialabError,
    NumericError,
    PartitionError,
    ProtocolError,
    SelectionError,
    ShapeError,
)
from .nn import (
    Activation,
    DenseLayer,
    GradientSet,
    LabeledDataset,
    ModelParams,
    batch_gradient,
    desk_model,
    forward,
    init_model,
    local_train,
    per_sample_grad_norms,
    per_sample_losses,
)

__version__ = "0.1.0"
