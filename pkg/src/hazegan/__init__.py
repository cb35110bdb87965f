"""hazegan: single-image dehazing with a conditional GAN on a small numpy autodiff engine."""

from .losses import PRESETS, LossWeights, preset
from .metrics import psnr, ssim
from .models import Discriminator, FeatureNet, Generator
from .physics import HazeParams, compose_haze, invert_haze, transmission_from_depth
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "Discriminator",
    "FeatureNet",
    "Generator",
    "HazeParams",
    "LossWeights",
    "PRESETS",
    "Tensor",
    "backward",
    "compose_haze",
    "invert_haze",
    "no_grad",
    "precision",
    "preset",
    "psnr",
    "ssim",
    "transmission_from_depth",
]
