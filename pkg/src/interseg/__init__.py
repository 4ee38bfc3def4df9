"""Intermediate-supervision U-Net variants on a self-contained autodiff core."""

from .tensor import Tensor, ShapeError, backward, no_grad, use_dtype
from .nn import ParamRegistry, ParamHandle, TiedView, share, tie_transposed
from .losses import LossWeights, LossBreakdown
from .models import ModelConfig, ForwardOutputs, Model, build, VARIANTS
from .train import TrainConfig, TrainReport, Adam, lr_at_epoch
from .data import SynthSpec, Sample, DatasetSplit, generate, split

__all__ = [
    "Tensor", "ShapeError", "backward", "no_grad", "use_dtype",
    "ParamRegistry", "ParamHandle", "TiedView", "share", "tie_transposed",
    "LossWeights", "LossBreakdown",
    "ModelConfig", "ForwardOutputs", "Model", "build", "VARIANTS",
    "TrainConfig", "TrainReport", "Adam", "lr_at_epoch",
    "SynthSpec", "Sample", "DatasetSplit", "generate", "split",
]
__version__ = "0.1.0"
