"""Differentiable Gaussian splatting."""

from .model import Gaussian3D, GaussianModel, PARAM_NAMES
from .render import (
    DensifyThresholds,
    GradientStats,
    Gradients,
    RenderState,
    backward,
    densify_and_prune,
    rasterize,
    render,
    render_backward,
)

__all__ = [
    "DensifyThresholds", "Gaussian3D", "GaussianModel", "GradientStats", "Gradients", "PARAM_NAMES",
    "RenderState", "backward", "densify_and_prune", "rasterize", "render", "render_backward",
]
