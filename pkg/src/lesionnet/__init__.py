"""Desk-scale hybrid convolution/self-attention classifier for dermatoscopic images."""

from .errors import LesionNetError, ValidationError
from .model import ModelConfig, build_model, load_checkpoint, predict_proba, save_checkpoint
from .tensor import Tensor, backward, finite_difference_gradient, no_grad

__version__ = "0.1.0"

__all__ = [
    "LesionNetError",
    "ModelConfig",
    "Tensor",
    "ValidationError",
    "backward",
    "build_model",
    "finite_difference_gradient",
    "load_checkpoint",
    "no_grad",
    "predict_proba",
    "save_checkpoint",
]
