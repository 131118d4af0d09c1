"""SSIM and a luminance-free, contrast-attenuated variant, on luma.

Local statistics use a normalized Gaussian window: near the border the window is
renormalized over in-image pixels, so constant images have exactly zero variance
everywhere. With a symmetric kernel and zero padding the filter's adjoint is
a blur of the normalized gradient, which the backward pass relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SsimSettings:
    window: int = 11
    window_sigma: float = 1.5
    c1: Optional[float] = None  # default (0.01 L)^2
    c2: Optional[float] = None  # default (0.03 L)^2
    contrast_exponent: float = 0.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not 0.0 <= self.contrast_exponent <= 1.0:
            raise ValueError("contrast_exponent must lie in [0, 1]")
        if self.C1 <= 0 or self.C2 <= 0:
            raise ValueError("stabilization constants must be positive")

    @property
    def C1(self) -> float:
        return self.c1 if self.c1 is not None else (0.01 * self.dynamic_range) ** 2

    @property
    def C2(self) -> float:
        return self.c2 if self.c2 is not None else (0.03 * self.dynamic_range) ** 2

    @property
    def C3(self) -> float:
        return self.C2 / 2.0


DEFAULT = SsimSettings()


@lru_cache(maxsize=16)
def _kernel(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window) - window // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = correlate1d(x, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


@lru_cache(maxsize=16)
def _norm(shape: tuple[int, int], window: int, sigma: float) -> np.ndarray:
    return _blur(np.ones(shape), _kernel(window, sigma))


def local_mean(x: np.ndarray, settings: SsimSettings = DEFAULT) -> np.ndarray:
    k = _kernel(settings.window, settings.window_sigma)
    return _blur(x, k) / _norm(x.shape, settings.window, settings.window_sigma)


def _mean_adjoint(g: np.ndarray, settings: SsimSettings) -> np.ndarray:
    k = _kernel(settings.window, settings.window_sigma)
    return _blur(g / _norm(g.shape, settings.window, settings.window_sigma), k)


def luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ LUMA


def _stats(x, y, settings):
    mx = local_mean(x, settings)
    my = local_mean(y, settings)
    vx = np.maximum(local_mean(x * x, settings) - mx * mx, 0.0)
    vy = np.maximum(local_mean(y * y, settings) - my * my, 0.0)
    cxy = local_mean(x * y, settings) - mx * my
    return mx, my, vx, vy, cxy


def _check(x, y):
    if x.shape != y.shape:
        raise ValueError(f"image dimensions differ: {x.shape} vs {y.shape}")


def ssim_map(x: np.ndarray, y: np.ndarray, settings: SsimSettings = DEFAULT) -> np.ndarray:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _check(x, y)
    x, y = luma(x), luma(y)
    mx, my, vx, vy, cxy = _stats(x, y, settings)
    c1, c2 = settings.C1, settings.C2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(x: np.ndarray, y: np.ndarray, settings: SsimSettings = DEFAULT) -> tuple[float, np.ndarray]:
    """Mean SSIM and the per-pixel map."""
    m = ssim_map(x, y, settings)
    return float(m.mean()), m


def mssim_map(x: np.ndarray, y: np.ndarray, settings: SsimSettings = DEFAULT) -> np.ndarray:
    """Per-pixel ``c**beta * s`` with the structure term clamped to [0, 1]; no luminance term."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _check(x, y)
    x, y = luma(x), luma(y)
    _, _, vx, vy, cxy = _stats(x, y, settings)
    c2, c3 = settings.C2, settings.C3
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    contrast = (2 * sx * sy + c2) / (vx + vy + c2)
    structure = np.clip((cxy + c3) / (sx * sy + c3), 0.0, 1.0)
    return contrast**settings.contrast_exponent * structure


def mssim(x: np.ndarray, y: np.ndarray, settings: SsimSettings = DEFAULT) -> tuple[float, np.ndarray]:
    m = mssim_map(x, y, settings)
    return float(m.mean()), m


def ssim_map_and_grad(x: np.ndarray, y: np.ndarray, weights: np.ndarray,
                      settings: SsimSettings = DEFAULT) -> tuple[np.ndarray, np.ndarray]:
    """SSIM map and the gradient of ``sum(weights * map)`` with respect to ``x``.

    ``x`` may be (H, W) or (H, W, 3); the gradient has the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check(x, y)
    xl, yl = luma(x), luma(y)
    mx, my, vx, vy, cxy = _stats(xl, yl, settings)
    c1, c2 = settings.C1, settings.C2
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    g = weights * s
    d_mx = g * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    d_mxx = g * (-1.0 / b2)
    d_mxy = g * (2.0 / a2)
    grad = (
        _mean_adjoint(d_mx, settings)
        + 2 * xl * _mean_adjoint(d_mxx, settings)
        + yl * _mean_adjoint(d_mxy, settings)
    )
    if x.ndim == 3:
        grad = grad[..., None] * LUMA
    return s, grad
