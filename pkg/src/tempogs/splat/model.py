"""Gaussian scene representation and its Adam optimizer state."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..io import read_ply, write_ply

PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "colors")
_PARAM_SHAPES = {"means": 3, "quats": 4, "log_scales": 3, "opacity_logits": 0, "colors": 3}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p / (1 - p))


@dataclass
class Gaussian3D:
    """A single splat in activated form."""

    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray
    opacity: float
    color: np.ndarray


class GaussianModel:
    """Structure-of-arrays Gaussian scene.

    Parameters are stored in optimization space: raw quaternions, log-scales and
    opacity logits. ``colors`` are plain RGB, kept in [0, 1] by the optimizer.
    """

    def __init__(self, means, quats, log_scales, opacity_logits, colors, step: int = 0):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.array(quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(colors, dtype=np.float64).reshape(n, 3)
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.reset_optimizer()
        self.step = int(step)

    # -- construction -------------------------------------------------------

    @classmethod
    def empty(cls) -> "GaussianModel":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> "GaussianModel":
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls(
            [g.position for g in gs],
            [g.rotation for g in gs],
            np.log([g.scale for g in gs]),
            logit(np.array([g.opacity for g in gs])),
            [g.color for g in gs],
        )

    @classmethod
    def isotropic(cls, means, scales, opacities, colors) -> "GaussianModel":
        means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        log_s = np.repeat(np.log(np.broadcast_to(np.asarray(scales, dtype=np.float64).reshape(-1, 1), (n, 1))), 3, axis=1)
        return cls(means, quats, log_s, logit(np.broadcast_to(opacities, (n,))), colors)

    def copy(self) -> "GaussianModel":
        out = GaussianModel(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                            self.opacity_logits.copy(), self.colors.copy(), self.step)
        out.moments = {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()}
        return out

    def reset_optimizer(self) -> None:
        self.step = 0
        self.moments = {name: (np.zeros_like(getattr(self, name)), np.zeros_like(getattr(self, name))) for name in PARAM_NAMES}

    # -- views --------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.means)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def gaussians(self) -> list[Gaussian3D]:
        q = self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)
        s, o = self.scales, self.opacities
        return [Gaussian3D(self.means[i].copy(), q[i], s[i], float(o[i]), self.colors[i].copy()) for i in range(len(self))]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def param_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def check(self) -> None:
        """Assert structural invariants (moments track parameters)."""
        for name in PARAM_NAMES:
            p = getattr(self, name)
            m, v = self.moments[name]
            if m.shape != p.shape or v.shape != p.shape:
                raise AssertionError(f"moments for {name} out of sync: {m.shape} vs {p.shape}")
        if self.step < 0:
            raise AssertionError("negative step")

    # -- structural edits ---------------------------------------------------

    def keep(self, mask: np.ndarray) -> None:
        """Drop Gaussians where ``mask`` is False (parameters and moments together)."""
        for name in PARAM_NAMES:
            setattr(self, name, getattr(self, name)[mask])
            m, v = self.moments[name]
            self.moments[name] = (m[mask], v[mask])

    def append(self, **new: np.ndarray) -> None:
        """Append Gaussians given raw parameter arrays; new moments start at zero."""
        for name in PARAM_NAMES:
            add = np.asarray(new[name], dtype=np.float64)
            setattr(self, name, np.concatenate([getattr(self, name), add]))
            m, v = self.moments[name]
            self.moments[name] = (np.concatenate([m, np.zeros_like(add)]), np.concatenate([v, np.zeros_like(add)]))

    # -- optimizer ----------------------------------------------------------

    def adam_step(self, grads: dict[str, np.ndarray], lrs: dict[str, float],
                  betas=(0.9, 0.999), eps: float = 1e-15, frozen: Optional[np.ndarray] = None) -> None:
        """One Adam update. Gaussians flagged in ``frozen`` receive zero gradient."""
        self.step += 1
        b1, b2 = betas
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        for name in PARAM_NAMES:
            g = grads[name]
            if frozen is not None and frozen.any():
                g = g.copy()
                g[frozen] = 0.0
            m, v = self.moments[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = getattr(self, name)
            p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + eps)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)

    # -- persistence --------------------------------------------------------

    def save_ply(self, path, binary: bool = True) -> None:
        """Raw parameters: scale_* are log-scales, opacity is a logit, rot_* an unnormalized quaternion."""
        cols = {"x": self.means[:, 0], "y": self.means[:, 1], "z": self.means[:, 2]}
        for i in range(3):
            cols[f"scale_{i}"] = self.log_scales[:, i]
        for i in range(4):
            cols[f"rot_{i}"] = self.quats[:, i]
        cols["opacity"] = self.opacity_logits
        cols.update(red=self.colors[:, 0], green=self.colors[:, 1], blue=self.colors[:, 2])
        write_ply(path, cols, binary=binary)

    @classmethod
    def load_ply(cls, path) -> "GaussianModel":
        d = read_ply(path)
        col = lambda *names: np.stack([np.asarray(d[n], dtype=np.float64) for n in names], axis=1)  # noqa: E731
        return cls(
            col("x", "y", "z"),
            col("rot_0", "rot_1", "rot_2", "rot_3"),
            col("scale_0", "scale_1", "scale_2"),
            np.asarray(d["opacity"], dtype=np.float64),
            col("red", "green", "blue"),
        )
