"""Patch-weighted photometric loss and the single-view training step."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .confidence import expand_to_pixels, patch_edges, patch_means
from .config import TrainConfig
from .geometry import Camera
from .splat import GaussianModel, GradientStats, backward, densify_and_prune, rasterize
from .ssim import DEFAULT, SsimSettings, ssim_map_and_grad

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {snapshot}")
        self.snapshot = snapshot


def _pixel_patch_sizes(height: int, width: int, grid: tuple[int, int]) -> np.ndarray:
    re, ce = patch_edges(height, grid[0]), patch_edges(width, grid[1])
    return np.outer(np.repeat(np.diff(re), np.diff(re)), np.repeat(np.diff(ce), np.diff(ce))).astype(np.float64)


def loss_init(rendered: np.ndarray, target: np.ndarray, confidence: np.ndarray, lam: float = 0.2,
              settings: SsimSettings = DEFAULT, literal: bool = False) -> tuple[float, np.ndarray]:
    """Confidence-weighted patch loss and its gradient with respect to ``rendered``.

    ``confidence`` is a (rows, cols) grid tiling the image. Per patch p with weight c_p:
    ``c_p * (mean |r - t| over the patch's pixels and channels + lam * (1 - mean SSIM over p))``.
    With ``literal=True`` the absolute error is summed over the patch pixels (channel mean per
    pixel) and the SSIM term is unweighted.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape or rendered.ndim != 3:
        raise ValueError(f"image dimensions differ: {rendered.shape} vs {target.shape}")
    conf = np.asarray(confidence, dtype=np.float64)
    if conf.ndim != 2:
        raise ValueError("confidence must be a 2-D patch grid")
    h, w, ch = rendered.shape
    grid = conf.shape
    if grid[0] > h or grid[1] > w:
        raise ValueError(f"confidence grid {grid} does not tile a {h}x{w} image")
    if not conf.any():
        return 0.0, np.zeros_like(rendered)

    c_pix = expand_to_pixels(conf, h, w)
    n_pix = _pixel_patch_sizes(h, w, grid)
    diff = rendered - target
    absdiff = np.abs(diff)
    ssim_w = 1.0 if literal else lam
    # weight of each pixel inside its patch mean
    l1_pix = c_pix if literal else c_pix / n_pix
    mean_w = c_pix / n_pix

    l1 = float(np.sum(l1_pix[..., None] * absdiff) / ch)
    smap, sgrad = ssim_map_and_grad(rendered, target, ssim_w * mean_w, settings)
    patch_ssim = patch_means(smap, grid)
    loss = l1 + ssim_w * float(np.sum(conf * (1.0 - patch_ssim)))
    grad = (l1_pix / ch)[..., None] * np.sign(diff) - sgrad
    return loss, grad


class Trainer:
    """Adam training on single-view steps with optional densification.

    Every step's loss is divided by the number of patches so a fully confident
    view weighs like a per-pixel mean.
    """

    def __init__(self, model: GaussianModel, config: TrainConfig, extent: float,
                 densify: Optional[bool] = None, max_iterations: Optional[int] = None):
        if extent <= 0:
            raise ValueError("scene extent must be positive")
        self.model = model
        self.config = config
        self.extent = float(extent)
        self.densify = config.densify if densify is None else bool(densify)
        self.max_iterations = config.max_iterations if max_iterations is None else int(max_iterations)
        self.iteration = 0
        self.losses: list[float] = []
        self.frozen: Optional[np.ndarray] = None
        self.stats = GradientStats(len(model))
        self.rng = np.random.default_rng([config.seed, 7])

    @property
    def done(self) -> bool:
        return self.iteration >= self.max_iterations

    def learning_rates(self) -> dict[str, float]:
        lr = self.config.lr
        t = min(self.iteration / max(self.max_iterations, 1), 1.0)
        pos = np.exp((1 - t) * np.log(lr.position) + t * np.log(lr.position_final)) * self.extent
        return {"means": float(pos), "quats": lr.rotation, "log_scales": lr.scale,
                "opacity_logits": lr.opacity, "colors": lr.color}

    def step(self, camera: Camera, target: np.ndarray, confidence: Optional[np.ndarray] = None,
             weight: float = 1.0) -> float:
        """One forward/backward/update on a single view. Returns the (normalized) loss."""
        if self.done:
            raise RuntimeError("iteration budget exhausted")
        cfg = self.config
        if confidence is None:
            confidence = np.ones(cfg.initial_grid)
        confidence = np.asarray(confidence, dtype=np.float64)
        state = rasterize(self.model, camera, cfg.background)
        loss, grad = loss_init(state.image, target, confidence, cfg.ssim_weight, cfg.ssim, cfg.literal_eq2)
        norm = weight / confidence.size
        loss *= norm
        if not np.isfinite(loss):
            raise NonFiniteLossError("non-finite loss", {
                "iteration": self.iteration, "camera": camera.id, "gaussians": len(self.model),
                "finite_params": bool(np.isfinite(self.model.param_vector()).all()),
            })
        grads = backward(state, grad * norm)
        self.model.adam_step(grads.as_dict(), self.learning_rates(), frozen=self.frozen)
        self.iteration += 1
        self.losses.append(float(loss))
        if self.densify:
            self._densify_bookkeeping(state, grads.means2d, camera)
        return float(loss)

    def _densify_bookkeeping(self, state, d_means2d, camera: Camera) -> None:
        cfg = self.config
        # frozen Gaussians are addressed by index, so the structure stays fixed while a mask is set
        if self.iteration > cfg.densify_until or self.frozen is not None:
            return
        seen = state.visible & (state.radii > 0)
        self.stats.update(d_means2d, seen, camera.width, camera.height)
        if self.iteration >= cfg.densify_from and self.iteration % cfg.densify_interval == 0:
            before = len(self.model)
            densify_and_prune(self.model, self.stats, cfg.thresholds(), self.extent, self.rng)
            self.stats = GradientStats(len(self.model))
            logger.debug("densify at %d: %d -> %d", self.iteration, before, len(self.model))

    def freeze(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(self.model),):
            raise ValueError("freeze mask must have one entry per Gaussian")
        self.frozen = mask
