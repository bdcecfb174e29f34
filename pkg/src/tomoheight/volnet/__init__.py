"""Volumetric U-Net regressors: architectures, heads, gradients, checkpoints."""

from .checkpoint import load_model, save_model
from .layers import ForwardCtx
from .models import (
    Backbone,
    CollapseKind,
    DEFAULT_BASE_WIDTH,
    HEAD_Z,
    ModelSpec,
    UNet3dRegressor,
    build_model,
    gradients,
    masked_mse,
)

__all__ = [
    "Backbone",
    "CollapseKind",
    "DEFAULT_BASE_WIDTH",
    "ForwardCtx",
    "HEAD_Z",
    "ModelSpec",
    "UNet3dRegressor",
    "build_model",
    "gradients",
    "load_model",
    "masked_mse",
    "save_model",
]
