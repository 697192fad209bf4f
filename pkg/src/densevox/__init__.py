"""densevox: hierarchical densely connected 3D CNN for volumetric segmentation.

A self-contained numpy/numba implementation: a minimal reverse-mode tensor
core, dense 3D convolutional blocks with two receptive-field scales, a
two-pathway (binary + 4-class) network, class-balanced patch training with
Adam, sliding-window dense inference, and Dice evaluation, all verifiable
end-to-end on synthetic phantom volumes.
"""

from .tensor import Tensor, no_grad, backward
from .model import NetworkSpec, Parameters, build
from .data import Volume, PhantomSpec, generate_phantom, normalize, sample_patches
from .train import TrainConfig, Adam, cross_entropy, train_step, run_training
from .infer import predict_volume, aggregate_regions
from .metrics import dice, evaluate

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "backward",
    "NetworkSpec", "Parameters", "build",
    "Volume", "PhantomSpec", "generate_phantom", "normalize", "sample_patches",
    "TrainConfig", "Adam", "cross_entropy", "train_step", "run_training",
    "predict_volume", "aggregate_regions",
    "dice", "evaluate",
    "__version__",
]
