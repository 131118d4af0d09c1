"""Patch-grid confidence maps for t0 views.

A t0 patch is trusted when a model that has been pushed toward the tn observations still
reproduces the t0 image there, scored with the luminance-free SSIM variant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Camera
from .splat import GaussianModel, render
from .ssim import DEFAULT, SsimSettings, mssim_map

logger = logging.getLogger(__name__)

View = tuple[Camera, np.ndarray]


def patch_edges(n: int, parts: int) -> np.ndarray:
    """Integer boundaries splitting ``n`` pixels into ``parts`` near-equal runs."""
    if parts < 1 or parts > n:
        raise ValueError(f"cannot split {n} pixels into {parts} patches")
    return (np.arange(parts + 1) * n) // parts


def patch_means(values: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Average a per-pixel (H, W) map within each patch of a rows x cols grid."""
    h, w = values.shape
    re, ce = patch_edges(h, grid[0]), patch_edges(w, grid[1])
    sums = np.add.reduceat(np.add.reduceat(values, re[:-1], axis=0), ce[:-1], axis=1)
    return sums / np.outer(np.diff(re), np.diff(ce))


def expand_to_pixels(grid_values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Broadcast per-patch values to an (H, W) map."""
    rows, cols = grid_values.shape
    re, ce = patch_edges(height, rows), patch_edges(width, cols)
    return np.repeat(np.repeat(grid_values, np.diff(re), axis=0), np.diff(ce), axis=1)


def patch_sizes(height: int, width: int, grid: tuple[int, int]) -> np.ndarray:
    re, ce = patch_edges(height, grid[0]), patch_edges(width, grid[1])
    return np.outer(np.diff(re), np.diff(ce)).astype(np.float64)


@dataclass
class ConfidenceMap:
    """Per-patch confidence for one t0 view; ``scores`` keeps the raw patch scores."""

    view_id: int
    values: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError("confidence values must be a non-empty 2-D grid")
        if self.scores.shape != self.values.shape:
            raise ValueError("scores and values must share the grid shape")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("confidence values must lie in [0, 1]")

    @property
    def grid_rows(self) -> int:
        return self.values.shape[0]

    @property
    def grid_cols(self) -> int:
        return self.values.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape

    def coverage(self) -> float:
        return float(self.values.mean())

    @classmethod
    def full(cls, view_id: int, grid: tuple[int, int]) -> "ConfidenceMap":
        return cls(view_id, np.ones(grid), np.ones(grid))

    @classmethod
    def empty(cls, view_id: int, grid: tuple[int, int]) -> "ConfidenceMap":
        return cls(view_id, np.zeros(grid), np.zeros(grid))

    def soft(self) -> "ConfidenceMap":
        """Soft variant: confidence equals the clipped raw score."""
        return ConfidenceMap(self.view_id, np.clip(self.scores, 0.0, 1.0), self.scores)

    def resample(self, grid: tuple[int, int], height: int, width: int) -> np.ndarray:
        """Values on another grid, taking each new patch's value from the patch holding its center."""
        re, ce = patch_edges(height, grid[0]), patch_edges(width, grid[1])
        rc = (re[:-1] + re[1:] - 1) / 2.0
        cc = (ce[:-1] + ce[1:] - 1) / 2.0
        old_re, old_ce = patch_edges(height, self.grid_rows), patch_edges(width, self.grid_cols)
        ri = np.searchsorted(old_re, rc, side="right") - 1
        ci = np.searchsorted(old_ce, cc, side="right") - 1
        return self.values[np.ix_(ri, ci)]

    def to_record(self) -> dict:
        return {
            "view_id": self.view_id,
            "grid": [self.grid_rows, self.grid_cols],
            "values": self.values.ravel().tolist(),
            "scores": self.scores.ravel().tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ConfidenceMap":
        rows, cols = rec["grid"]
        return cls(int(rec["view_id"]), np.reshape(rec["values"], (rows, cols)), np.reshape(rec["scores"], (rows, cols)))


def coverage(maps: Sequence[ConfidenceMap]) -> float:
    """Fraction of confident patches over all views."""
    if not maps:
        return 0.0
    return float(np.mean([m.values.mean() for m in maps]))


def threshold_scores(scores: np.ndarray, tau: float) -> np.ndarray:
    """Binary confidence: 1 where ``score >= tau``."""
    return (np.asarray(scores) >= tau).astype(np.float64)


def patch_scores(rendered: np.ndarray, target: np.ndarray, grid: tuple[int, int],
                 settings: SsimSettings = DEFAULT) -> np.ndarray:
    return patch_means(mssim_map(rendered, target, settings), grid)


def build_confidence_maps(adapted: GaussianModel, t0_views: Sequence[View], grid: tuple[int, int] = (16, 16),
                          tau: float = 0.8, settings: SsimSettings = DEFAULT,
                          background=(0.0, 0.0, 0.0)) -> list[ConfidenceMap]:
    """Score every t0 view rendered by the adapted model against its ground truth."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    maps = []
    for cam, image in t0_views:
        scores = patch_scores(render(adapted, cam, background), image, grid, settings)
        maps.append(ConfidenceMap(cam.id, threshold_scores(scores, tau), scores))
    return maps


def refine_confidence_maps(current: Sequence[ConfidenceMap], gn: GaussianModel, t0_views: Sequence[View],
                           grid_fine: tuple[int, int] = (32, 32), tau_iter: float = 0.92,
                           settings: SsimSettings = DEFAULT, background=(0.0, 0.0, 0.0)) -> list[ConfidenceMap]:
    """Expand confident regions: new map = max(previous resampled to the fine grid, new binary grid)."""
    if not 0 < tau_iter < 1:
        raise ValueError("tau_iter must lie in (0, 1)")
    if len(current) != len(t0_views):
        raise ValueError("one confidence map per t0 view is required")
    out = []
    for prev, (cam, image) in zip(current, t0_views):
        if prev.view_id != cam.id:
            raise ValueError(f"confidence map for view {prev.view_id} paired with camera {cam.id}")
        if grid_fine[0] < prev.grid_rows or grid_fine[1] < prev.grid_cols:
            raise ValueError("refinement grid must not be coarser than the current grid")
        scores = patch_scores(render(gn, cam, background), image, grid_fine, settings)
        fresh = threshold_scores(scores, tau_iter)
        base = prev.resample(grid_fine, cam.height, cam.width)
        out.append(ConfidenceMap(cam.id, np.maximum(base, fresh), scores))
    return out


def adaptation_phase(g0: GaussianModel, tn_views: Sequence[View], steps: int = 500, config=None) -> GaussianModel:
    """Briefly train a copy of ``g0`` on the tn views with the plain photometric loss.

    No confidence weighting and no densification; ``g0`` itself is left untouched.
    """
    from .config import TrainConfig
    from .training import Trainer

    if steps < 1:
        raise ValueError("adaptation needs at least one step")
    if len(g0) == 0:
        raise ValueError("adaptation needs a non-empty model")
    if not tn_views:
        raise ValueError("adaptation needs at least one tn view")
    config = config or TrainConfig()
    model = g0.copy()
    model.reset_optimizer()
    trainer = Trainer(model, config, extent=_extent(model), densify=False, max_iterations=steps)
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    for _ in range(steps):
        if not order:
            order = list(rng.permutation(len(tn_views)))
        cam, image = tn_views[order.pop()]
        trainer.step(cam, image)
    logger.debug("adaptation: %d steps, final loss %.5f", steps, trainer.losses[-1])
    return model


def _extent(model: GaussianModel) -> float:
    if len(model) < 2:
        return 1.0
    return float(np.linalg.norm(np.percentile(model.means, 98, axis=0) - np.percentile(model.means, 2, axis=0))) or 1.0


def dump_heatmap(path, cmap: ConfidenceMap, height: int, width: int, image: Optional[np.ndarray] = None) -> None:
    """PNG overlay of the confidence map (green = confident) for inspection."""
    from .io import save_image

    mask = expand_to_pixels(cmap.values, height, width)
    base = np.full((height, width, 3), 0.5) if image is None else 0.5 * np.asarray(image)
    overlay = base.copy()
    overlay[..., 1] += 0.5 * mask
    overlay[..., 0] += 0.5 * (1 - mask)
    save_image(path, np.clip(overlay, 0, 1))
