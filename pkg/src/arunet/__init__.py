"""Differentiable 3D tensor engine and a desk-scale volumetric
segmentation network with atrous residual skips and decoder attention."""

from .autodiff import (FiniteDiffReport, Node, Parameter, Tape, backward,
                       finite_diff_check)
from .errors import (CheckpointError, ConfigError, DataError, EngineError,
                     NumericError, ShapeError)
from .model import (AtrousResUNet, ModelConfig, build, expected_census,
                    load_checkpoint, save_checkpoint)
from .tensor import Shape, Tensor
from .train import (Adam, AdamConfig, DiceLossConfig, MetricReport,
                    TrainConfig, ablation_run, evaluate, soft_dice_loss,
                    train_loop)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamConfig", "AtrousResUNet", "CheckpointError", "ConfigError",
    "DataError", "DiceLossConfig", "EngineError", "FiniteDiffReport",
    "MetricReport", "ModelConfig", "Node", "NumericError", "Parameter",
    "Shape", "ShapeError", "Tape", "Tensor", "TrainConfig", "ablation_run",
    "backward", "build", "evaluate", "expected_census", "finite_diff_check",
    "load_checkpoint", "save_checkpoint", "soft_dice_loss", "train_loop",
    "__version__",
]
