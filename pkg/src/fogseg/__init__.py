"""
fogseg
------

Semantic segmentation of foggy street scenes: an unpaired foggy -> clear translation model
feeding a two-encoder (RGB + luminance/depth) segmentation network, trained and evaluated
through a four-step protocol on a from-scratch numpy autodiff core.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_run_config
from .core.tensor import Tensor, backward, no_grad
from .errors import (CheckpointError, ConfigError, DataError, FogSegError, GradcheckError, NumericalError,
                     ShapeError)
from .losses import ClassWeights, UncertaintyWeights, class_weights, joint_loss, seg_loss
from .nn.params import ParamRegistry, init_params, param_count
from .nn.segnet import SegNet, SegNetConfig
from .nn.transfer import TransferConfig, TransferModel, adversarial_loss, cycle_loss, gan_train_step
from .utils.metrics import ConfusionMatrix

__all__ = [
    "__version__",
    "RunConfig", "load_run_config",
    "Tensor", "backward", "no_grad",
    "FogSegError", "ShapeError", "NumericalError", "ConfigError", "DataError", "CheckpointError",
    "GradcheckError",
    "ClassWeights", "UncertaintyWeights", "class_weights", "joint_loss", "seg_loss",
    "ParamRegistry", "init_params", "param_count",
    "SegNet", "SegNetConfig",
    "TransferConfig", "TransferModel", "adversarial_loss", "cycle_loss", "gan_train_step",
    "ConfusionMatrix",
]
