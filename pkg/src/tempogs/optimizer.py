"""Progressive cross-temporal optimization of the tn model, plus the comparison variants."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .confidence import (
    ConfidenceMap,
    adaptation_phase,
    build_confidence_maps,
    coverage,
    patch_edges,
    refine_confidence_maps,
)
from .config import TrainConfig
from .geometry import Camera, PointCloud, project_points
from .splat import GaussianModel
from .training import Trainer

logger = logging.getLogger(__name__)

View = tuple[Camera, np.ndarray]
TERMINATION_REASONS = ("max_iterations", "coverage_converged")


def init_model_from_cloud(cloud: PointCloud, config: Optional[TrainConfig] = None) -> GaussianModel:
    """One isotropic Gaussian per point, sized by the mean distance to its 3 nearest neighbours."""
    config = config or TrainConfig()
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot initialize a model from an empty cloud")
    extent = cloud.extent() or 1.0
    lo, hi = 1e-4 * extent, 0.1 * extent
    if n == 1:
        scales = np.array([lo])
    else:
        k = min(4, n)
        dist, _ = cKDTree(cloud.points).query(cloud.points, k=k)
        scales = np.clip(dist[:, 1:].mean(axis=1), lo, hi)
    colors = np.full((n, 3), 0.5) if cloud.colors is None else np.clip(cloud.colors, 0.0, 1.0)
    return GaussianModel.isotropic(cloud.points, scales, config.init_opacity, colors)


def camera_extent(cameras: Sequence[Camera]) -> float:
    """1.1 x the largest camera distance from the mean camera center (at least 1e-3)."""
    centers = np.array([c.center for c in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(0), axis=1).max()) if len(centers) else 0.0
    return max(1.1 * radius, 1e-3)


@dataclass
class TrainReport:
    coverage: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    iterations: int = 0
    epochs: int = 0
    refinements: int = 0
    seconds: float = 0.0
    termination: str = "max_iterations"
    frozen: int = 0
    gaussians: int = 0
    metrics: dict = field(default_factory=dict)

    def check(self, max_iterations: int) -> None:
        if any(b < a for a, b in zip(self.coverage, self.coverage[1:])):
            raise AssertionError("coverage decreased between refinement rounds")
        if self.iterations > max_iterations:
            raise AssertionError("iteration budget exceeded")
        if self.termination not in TERMINATION_REASONS:
            raise AssertionError(f"unknown termination reason {self.termination!r}")

    def to_record(self, loss_stride: int = 10) -> dict:
        rec = asdict(self)
        rec["losses"] = self.losses[::loss_stride]
        return rec


def _interleave(a: list, b: list, rng: np.random.Generator) -> list:
    """Random merge of two sequences, keeping the order within each."""
    if not b:
        return list(a)
    slots = np.zeros(len(a) + len(b), dtype=bool)
    slots[rng.choice(len(slots), size=len(b), replace=False)] = True
    ia, ib = iter(a), iter(b)
    return [next(ib) if s else next(ia) for s in slots]


def static_mask(model: GaussianModel, maps: Sequence[ConfidenceMap], t0_views: Sequence[View],
                fraction: float = 0.8) -> np.ndarray:
    """Gaussians whose centers fall in confident patches in at least ``fraction`` of the t0 views that see them."""
    seen = np.zeros(len(model))
    confident = np.zeros(len(model))
    for cmap, (cam, _) in zip(maps, t0_views):
        uv, front = project_points(cam, model.means)
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        idx = np.flatnonzero(inside)
        px = np.floor(uv[idx]).astype(np.int64)
        re, ce = patch_edges(cam.height, cmap.grid_rows), patch_edges(cam.width, cmap.grid_cols)
        row = np.searchsorted(re, px[:, 1], side="right") - 1
        col = np.searchsorted(ce, px[:, 0], side="right") - 1
        seen[idx] += 1
        confident[idx] += cmap.values[row, col] >= 0.5
    return (seen > 0) & (confident >= fraction * np.maximum(seen, 1))


def _train(gn: GaussianModel, tn_views: Sequence[View], t0_views: Sequence[View],
           maps: Optional[list[ConfidenceMap]], config: TrainConfig, refine: bool,
           extent: float) -> TrainReport:
    """Shared loop. ``t0_views`` and ``maps`` run in parallel; views with empty confidence are skipped."""
    start = time.perf_counter()
    report = TrainReport()
    trainer = Trainer(gn, config, extent=extent)
    rng_tn = np.random.default_rng([config.seed, 1])
    rng_t0 = np.random.default_rng([config.seed, 2])
    stride = config.t0_view_stride
    supervised = list(range(0, len(t0_views), stride))
    tn_conf = np.ones(config.initial_grid)
    if maps is not None:
        report.coverage.append(coverage(maps))
    refining = refine and maps is not None
    epoch = 0
    while not trainer.done:
        tn_order = [("tn", int(i)) for i in rng_tn.permutation(len(tn_views))]
        active = []
        if maps is not None:
            active = [("t0", supervised[int(i)]) for i in rng_t0.permutation(len(supervised))
                      if maps[supervised[int(i)]].values.any()]
        for kind, i in _interleave(tn_order, active, rng_t0):
            if trainer.done:
                break
            if kind == "tn":
                cam, image = tn_views[i]
                trainer.step(cam, image, tn_conf)
            else:
                cam, image = t0_views[i]
                values = maps[i].soft().values if config.soft_confidence else maps[i].values
                trainer.step(cam, image, values, weight=config.t0_supervision_weight)
        else:
            epoch += 1
            if refining and epoch % config.refine_interval_epochs == 0:
                maps = refine_confidence_maps(maps, gn, t0_views, config.fine_grid, config.tau_iter,
                                              config.ssim, config.background)
                report.refinements += 1
                report.coverage.append(coverage(maps))
                change = report.coverage[-1] - report.coverage[-2]
                logger.info("refinement %d at iteration %d: coverage %.4f (change %.4f)",
                            report.refinements, trainer.iteration, report.coverage[-1], change)
                if change < config.coverage_convergence:
                    if not config.static_freeze:
                        report.termination = "coverage_converged"
                        break
                    # keep training the changed regions with the static ones fixed
                    refining = False
                    mask = static_mask(gn, maps, t0_views, config.static_freeze_fraction)
                    trainer.freeze(mask)
                    report.frozen = int(mask.sum())
    report.epochs = epoch
    report.iterations = trainer.iteration
    report.losses = trainer.losses
    report.gaussians = len(gn)
    report.seconds = time.perf_counter() - start
    report.check(config.max_iterations)
    return report


def _require_views(tn_views, t0_views=None):
    if not tn_views:
        raise ValueError("at least one tn training view is required")
    if t0_views is not None and not t0_views:
        raise ValueError("at least one t0 view is required")


def initial_confidence(g0: GaussianModel, t0_views: Sequence[View], tn_views: Sequence[View],
                       config: TrainConfig) -> list[ConfidenceMap]:
    """Adapt a copy of ``g0`` to the tn views and score the t0 views against it."""
    adapted = adaptation_phase(g0, tn_views, config.adaptation_steps, config)
    return build_confidence_maps(adapted, t0_views, config.initial_grid, config.tau, config.ssim, config.background)


def progressive_optimize(g0: GaussianModel, p_fused: PointCloud, t0_views: Sequence[View],
                         tn_views: Sequence[View], config: Optional[TrainConfig] = None,
                         maps: Optional[list[ConfidenceMap]] = None,
                         refine: bool = True) -> tuple[GaussianModel, TrainReport, list[ConfidenceMap]]:
    """Train the tn model from the fused cloud with confidence-masked t0 supervision.

    ``maps`` short-circuits the adaptation phase when given. Returns the model, the report
    and the final confidence maps.
    """
    config = config or TrainConfig()
    _require_views(tn_views, t0_views)
    if maps is None:
        maps = initial_confidence(g0, t0_views, tn_views, config)
    if len(maps) != len(t0_views):
        raise ValueError("one confidence map per t0 view is required")
    gn = init_model_from_cloud(p_fused, config)
    extent = camera_extent([c for c, _ in tn_views])
    report = _train(gn, tn_views, t0_views, list(maps), config, refine, extent)
    return gn, report, list(maps)


def baseline_optimize(p_fused: PointCloud, tn_views: Sequence[View],
                      config: Optional[TrainConfig] = None) -> tuple[GaussianModel, TrainReport]:
    """Plain training on the tn views from the fused cloud: no t0 images, no confidence."""
    config = config or TrainConfig()
    _require_views(tn_views)
    gn = init_model_from_cloud(p_fused, config)
    extent = camera_extent([c for c, _ in tn_views])
    return gn, _train(gn, tn_views, [], None, config, False, extent)


def finetune_optimize(g0: GaussianModel, tn_views: Sequence[View],
                      config: Optional[TrainConfig] = None) -> tuple[GaussianModel, TrainReport]:
    """Continue training the t0 model directly on the tn views (fresh optimizer state)."""
    config = config or TrainConfig()
    _require_views(tn_views)
    gn = g0.copy()
    gn.reset_optimizer()
    extent = camera_extent([c for c, _ in tn_views])
    return gn, _train(gn, tn_views, [], None, config, False, extent)
