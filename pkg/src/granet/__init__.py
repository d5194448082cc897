"""Coarse-to-fine single-image rain removal on a small numpy autodiff engine."""

from .model import GraNetConfig, GraNetWeights, granet_forward
from .tensor import Tensor

__all__ = ["Tensor", "GraNetConfig", "GraNetWeights", "granet_forward"]
__version__ = "0.1.0"
