"""Attention U-Net brain tumour segmentation with Grad-CAM explanations."""

from .model import AttentionUNet, ModelConfig, build_model, forward, load_weights, predict_mask, save_weights
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "AttentionUNet",
    "ModelConfig",
    "Tensor",
    "build_model",
    "forward",
    "load_weights",
    "no_grad",
    "precision",
    "predict_mask",
    "save_weights",
]
