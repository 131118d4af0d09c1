"""Training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .splat.render import DensifyThresholds
from .ssim import SsimSettings


@dataclass
class LearningRates:
    """Per-group Adam step sizes. ``position`` is relative to the scene extent."""

    position: float = 1.6e-4
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3


@dataclass
class TrainConfig:
    max_iterations: int = 7000
    adaptation_steps: int = 500
    refine_interval_epochs: int = 108
    tau: float = 0.8
    tau_iter: float = 0.92
    initial_grid: tuple[int, int] = (16, 16)
    fine_grid: tuple[int, int] = (32, 32)
    coverage_convergence: float = 0.02
    ssim_weight: float = 0.2
    t0_supervision_weight: float = 1.0
    t0_view_stride: int = 4
    literal_eq2: bool = False
    soft_confidence: bool = False
    static_freeze: bool = False
    static_freeze_fraction: float = 0.8
    lr: LearningRates = field(default_factory=LearningRates)
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 3500
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 10000
    init_opacity: float = 0.1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ssim: SsimSettings = field(default_factory=SsimSettings)
    seed: int = 0

    def __post_init__(self):
        self.initial_grid = tuple(self.initial_grid)
        self.fine_grid = tuple(self.fine_grid)
        self.background = tuple(self.background)
        if not 0 < self.tau < self.tau_iter < 1:
            raise ValueError("need 0 < tau < tau_iter < 1")
        if self.refine_interval_epochs < 1:
            raise ValueError("refine_interval_epochs must be >= 1")
        if not 0 < self.coverage_convergence < 1:
            raise ValueError("coverage_convergence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.t0_view_stride < 1:
            raise ValueError("t0_view_stride must be >= 1")

    def thresholds(self) -> DensifyThresholds:
        return DensifyThresholds(
            grad_threshold=self.densify_grad_threshold,
            percent_dense=self.percent_dense,
            prune_opacity=self.prune_opacity,
            max_gaussians=self.max_gaussians,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """Overlay ``data`` on ``base`` (or the defaults). Unknown keys are an error."""
        current = (base or cls()).to_dict()
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise KeyError(f"unknown config key: {key}")
            if key in ("lr", "ssim"):
                if dataclasses.is_dataclass(value):
                    value = dataclasses.asdict(value)
                current[key] = {**current[key], **value}
            else:
                current[key] = value
        current["lr"] = LearningRates(**current["lr"])
        current["ssim"] = SsimSettings(**current["ssim"])
        return cls(**current)

    @classmethod
    def from_toml(cls, path, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        with open(Path(path), "rb") as f:
            return cls.from_dict(tomllib.load(f), base)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict(changes, self)
