"""mognet: a quantized-CNN toolkit.

Cellular-automaton-generated fixed weights, balanced ternary
quantization-aware training, MUX-gated residual blocks, and a bit-exact
integer-only inference engine with a matching float64 simulation.
"""

__version__ = "0.1.0"

from .blocks import Model, ModelConfig, build_model, compression_rate, size_report
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateDistributionError,
    EngineMismatchError,
    MognetError,
    ShapeError,
)
from .int_inference import (
    FrozenModel,
    QuantTensor,
    export_checkpoint,
    freeze,
    import_checkpoint,
    int_forward,
    real_forward,
)
from .training import TrainConfig, evaluate_float, recalibrate_bn, train_btq, two_stage_train

__all__ = [
    "__version__",
    "Model",
    "ModelConfig",
    "build_model",
    "compression_rate",
    "size_report",
    "TrainConfig",
    "evaluate_float",
    "recalibrate_bn",
    "train_btq",
    "two_stage_train",
    "FrozenModel",
    "QuantTensor",
    "freeze",
    "export_checkpoint",
    "import_checkpoint",
    "int_forward",
    "real_forward",
    "MognetError",
    "ConfigError",
    "ShapeError",
    "DataError",
    "CheckpointError",
    "DegenerateDistributionError",
    "EngineMismatchError",
]
