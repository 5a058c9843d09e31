"""Artery-vein classification on 2-channel OCT/OCTA images.

A self-contained library: numpy tensors with reverse-mode autodiff, the
AV-Net dense encoder-decoder network, dice+focal losses, Adam, a k-fold
training harness, evaluation metrics, a synthetic dataset generator, and the
``avnet`` command line.
"""

from .blocks import AvNetConfig, AvNetModel, ParameterStore, build_avnet, desk_config
from .losses import LossConfig, compound_loss, dice_loss, focal_loss
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AvNetConfig",
    "AvNetModel",
    "LossConfig",
    "ParameterStore",
    "Tape",
    "Tensor",
    "backward",
    "build_avnet",
    "compound_loss",
    "desk_config",
    "dice_loss",
    "focal_loss",
    "__version__",
]
