"""Question-guided infrared/visible image fusion toolkit."""

from .autodiff import Tensor, grad_check
from .config import TrainConfig
from .fusenet import FusionArch, FusionModel, fuse_forward, init_fusion_model, load_model, save_model
from .losses import LossBreakdown, total_loss
from .pipeline import TrainResult, fuse, train

__all__ = [
    "FusionArch",
    "FusionModel",
    "LossBreakdown",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "fuse",
    "fuse_forward",
    "grad_check",
    "init_fusion_model",
    "load_model",
    "save_model",
    "total_loss",
    "train",
]
__version__ = "0.1.0"
