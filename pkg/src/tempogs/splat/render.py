"""Tile-based Gaussian rasterization with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Camera, quat_to_rotmat
from . import _kernels as K
from .model import GaussianModel, sigmoid

LOWPASS = 0.3  # px^2 added to the screen-space covariance diagonal
NEAR = 0.01
FRUSTUM_CLAMP = 1.3  # x/z, y/z in the projection Jacobian are clamped to this multiple of the half field of view


def _clamped_ratios(p_cam, zs, camera: Camera):
    """View-space x/z and y/z clamped for the Jacobian, and masks of the clamped entries."""
    lim = FRUSTUM_CLAMP * np.array([0.5 * camera.width / camera.fx, 0.5 * camera.height / camera.fy])
    ratio = p_cam[:, :2] / zs[:, None]
    clamped = np.abs(ratio) > lim
    return np.clip(ratio, -lim, lim), clamped


@dataclass
class Gradients:
    """dL/d(raw parameter) per Gaussian, plus the screen-space mean gradient used for densification."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    means2d: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"means": self.means, "quats": self.quats, "log_scales": self.log_scales,
                "opacity_logits": self.opacity_logits, "colors": self.colors}

    @classmethod
    def zeros(cls, n: int) -> "Gradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), np.zeros((n, 2)))

    def add(self, other: "Gradients", weight: float = 1.0) -> None:
        for name in ("means", "quats", "log_scales", "opacity_logits", "colors", "means2d"):
            getattr(self, name).__iadd__(weight * getattr(other, name))


@dataclass
class RenderState:
    """Everything the backward pass needs from one forward pass."""

    camera: Camera
    background: np.ndarray
    image: np.ndarray
    visible: np.ndarray
    p_cam: np.ndarray
    jac: np.ndarray
    rot: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    scales: np.ndarray
    cov3: np.ndarray
    conics: np.ndarray
    means2d: np.ndarray
    radii: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    tile_start: np.ndarray
    tile_end: np.ndarray
    ids: np.ndarray
    final_t: np.ndarray
    n_contrib: np.ndarray
    n_gaussians: int = field(default=0)


def _tile_lists(means2d, radii, depth, visible, width, height):
    tiles_x = (width + K.TILE - 1) // K.TILE
    tiles_y = (height + K.TILE - 1) // K.TILE
    idx = np.flatnonzero(visible)
    mx, my, r = means2d[idx, 0], means2d[idx, 1], radii[idx]
    on_screen = (mx + r >= 0) & (mx - r <= width - 1) & (my + r >= 0) & (my - r <= height - 1)
    idx, mx, my, r = idx[on_screen], mx[on_screen], my[on_screen], r[on_screen]
    x0 = np.clip(np.floor((mx - r) / K.TILE), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((mx + r) / K.TILE), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((my - r) / K.TILE), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((my + r) / K.TILE), 0, tiles_y - 1).astype(np.int64)
    wx = x1 - x0 + 1
    counts = wx * (y1 - y0 + 1)
    total = int(counts.sum())
    n_tiles = tiles_x * tiles_y
    if total == 0:
        z = np.zeros(n_tiles, dtype=np.int64)
        return z, z.copy(), np.zeros(0, dtype=np.int64), tiles_x
    gid = np.repeat(idx, counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    wx_r = np.repeat(wx, counts)
    tile = (np.repeat(y0, counts) + offset // wx_r) * tiles_x + np.repeat(x0, counts) + offset % wx_r
    order = np.lexsort((depth[gid], tile))
    tile, gid = tile[order], gid[order]
    tile_ids = np.arange(n_tiles)
    start = np.searchsorted(tile, tile_ids, side="left")
    end = np.searchsorted(tile, tile_ids, side="right")
    return start.astype(np.int64), end.astype(np.int64), gid.astype(np.int64), tiles_x


def rasterize(model: GaussianModel, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderState:
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    n = len(model)
    w, h = camera.width, camera.height
    p_cam = model.means @ camera.rotation.T + camera.translation
    z = p_cam[:, 2]
    visible = z > NEAR
    zs = np.where(visible, z, 1.0)
    fx, fy = camera.fx, camera.fy

    qnorm = np.linalg.norm(model.quats, axis=1)
    qn = model.quats / qnorm[:, None]
    rot = quat_to_rotmat(qn) if n else np.zeros((0, 3, 3))
    scales = np.exp(model.log_scales)
    m = rot * scales[:, None, :]
    cov3 = m @ np.transpose(m, (0, 2, 1))

    # off-screen Gaussians close to the camera would otherwise get huge footprints
    ratio, _ = _clamped_ratios(p_cam, zs, camera)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * ratio[:, 0] / zs
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * ratio[:, 1] / zs
    tmat = jac @ camera.rotation
    cov2 = tmat @ cov3 @ np.transpose(tmat, (0, 2, 1))
    a = cov2[:, 0, 0] + LOWPASS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + LOWPASS
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(np.sqrt(K.Q_CUT * lam))
    means2d = np.stack([fx * p_cam[:, 0] / zs + camera.cx, fy * p_cam[:, 1] / zs + camera.cy], axis=1)
    opacity = sigmoid(model.opacity_logits)
    colors = np.ascontiguousarray(model.colors)

    start, end, ids, tiles_x = _tile_lists(means2d, radii, z, visible, w, h)
    image, final_t, n_contrib = K.empty_outputs(h, w)
    K.forward_kernel(start, end, ids, means2d, conics, opacity, colors, bg, w, h, tiles_x, image, final_t, n_contrib)
    return RenderState(camera, bg, image, visible, p_cam, jac, rot, qn, qnorm, scales, cov3, conics,
                       means2d, radii, opacity, colors, start, end, ids, final_t, n_contrib, n)


def render(model: GaussianModel, camera: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Render an (H, W, 3) image, clamped to [0, 1]."""
    return np.clip(rasterize(model, camera, background).image, 0.0, 1.0)


def _drot_dq(qn: np.ndarray, dl_drot: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to the normalized quaternion (w, x, y, z)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = dl_drot
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def backward(state: RenderState, dl_dimage: np.ndarray) -> Gradients:
    """Gradients of ``sum(dl_dimage * image)`` with respect to the raw model parameters.

    Differentiates the unclamped image, i.e. :attr:`RenderState.image`.
    """
    cam = state.camera
    n = state.n_gaussians
    dl_dimage = np.ascontiguousarray(dl_dimage, dtype=np.float64)
    if dl_dimage.shape != state.image.shape:
        raise ValueError(f"gradient image shape {dl_dimage.shape} != {state.image.shape}")
    grads = Gradients.zeros(n)
    if n == 0:
        return grads
    d_means2d = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_colors = np.zeros((n, 3))
    tiles_x = (cam.width + K.TILE - 1) // K.TILE
    K.backward_kernel(state.tile_start, state.tile_end, state.ids, state.means2d, state.conics, state.opacity, state.colors,
                      state.background, cam.width, cam.height, tiles_x, state.final_t, state.n_contrib,
                      dl_dimage, d_means2d, d_conics, d_opacity, d_colors)

    vis = state.visible
    op = state.opacity
    grads.colors = d_colors
    grads.opacity_logits = d_opacity * op * (1 - op)
    grads.means2d = d_means2d

    # conic = inverse(cov2): dL/dcov2 = -conic G conic with G the symmetric gradient
    ca, cb, cc = state.conics[:, 0], state.conics[:, 1], state.conics[:, 2]
    conic = np.empty((n, 2, 2))
    conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 0], conic[:, 1, 1] = ca, cb, cb, cc
    gmat = np.empty((n, 2, 2))
    gmat[:, 0, 0] = d_conics[:, 0]
    gmat[:, 0, 1] = gmat[:, 1, 0] = 0.5 * d_conics[:, 1]
    gmat[:, 1, 1] = d_conics[:, 2]
    d_cov2 = -conic @ gmat @ conic

    w = cam.rotation
    tmat = state.jac @ w
    d_cov3 = np.transpose(tmat, (0, 2, 1)) @ d_cov2 @ tmat
    d_tmat = 2.0 * d_cov2 @ tmat @ state.cov3
    d_jac = d_tmat @ w.T

    fx, fy = cam.fx, cam.fy
    x, y = state.p_cam[:, 0], state.p_cam[:, 1]
    z = np.where(vis, state.p_cam[:, 2], 1.0)
    ratio, clamped = _clamped_ratios(state.p_cam, z, cam)
    # jac[:, 0, 2] = -fx u / z with u = clip(x / z); a clamped u no longer depends on x
    free = ~clamped
    d_pc = np.zeros((n, 3))
    d_pc[:, 0] = d_means2d[:, 0] * fx / z - free[:, 0] * d_jac[:, 0, 2] * fx / z**2
    d_pc[:, 1] = d_means2d[:, 1] * fy / z - free[:, 1] * d_jac[:, 1, 2] * fy / z**2
    d_pc[:, 2] = (
        -d_means2d[:, 0] * fx * x / z**2 - d_means2d[:, 1] * fy * y / z**2
        - d_jac[:, 0, 0] * fx / z**2 - d_jac[:, 1, 1] * fy / z**2
        + d_jac[:, 0, 2] * fx * ratio[:, 0] / z**2 * np.where(free[:, 0], 2.0, 1.0)
        + d_jac[:, 1, 2] * fy * ratio[:, 1] / z**2 * np.where(free[:, 1], 2.0, 1.0)
    )
    d_pc[~vis] = 0.0
    grads.means = d_pc @ w

    # cov3 = M M^T, M = R diag(s)
    m = state.rot * state.scales[:, None, :]
    d_m = 2.0 * d_cov3 @ m
    d_rot = d_m * state.scales[:, None, :]
    d_scales = np.einsum("nij,nij->nj", d_m, state.rot)
    d_scales[~vis] = 0.0
    grads.log_scales = d_scales * state.scales
    d_qn = _drot_dq(state.qn, d_rot)
    d_qn[~vis] = 0.0
    qn = state.qn
    grads.quats = (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / state.qnorm[:, None]
    return grads


def render_backward(model: GaussianModel, camera: Camera, background, dl_dimage: np.ndarray) -> Gradients:
    """Gradients of ``L = sum(dl_dimage * render(...))`` with respect to the raw parameters."""
    state = rasterize(model, camera, background)
    return backward(state, dl_dimage)


@dataclass
class DensifyThresholds:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 50_000
    split_factor: float = 1.6


class GradientStats:
    """Running per-Gaussian screen-space gradient norms (in normalized device units)."""

    def __init__(self, n: int):
        self.accum = np.zeros(n)
        self.count = np.zeros(n)

    def update(self, d_means2d: np.ndarray, visible: np.ndarray, width: int, height: int, scale: float = 1.0) -> None:
        ndc = d_means2d * np.array([0.5 * width, 0.5 * height]) * scale
        norms = np.linalg.norm(ndc, axis=1)
        self.accum[visible] += norms[visible]
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


def densify_and_prune(model: GaussianModel, stats: GradientStats, thresholds: DensifyThresholds,
                      scene_extent: float, rng: np.random.Generator) -> GaussianModel:
    """Clone/split high-gradient Gaussians and drop near-transparent ones, in place.

    Returns the same model for chaining. Moments of new Gaussians start at zero.
    """
    n = len(model)
    if len(stats.accum) != n:
        raise ValueError("gradient statistics do not match the model size")
    grad = stats.mean()
    high = grad >= thresholds.grad_threshold
    room = thresholds.max_gaussians - n
    if room <= 0:
        high[:] = False
    elif high.sum() > room:
        # keep the strongest candidates when capped
        cut = np.sort(grad[high])[::-1][room - 1]
        high &= grad >= cut
    max_scale = model.scales.max(axis=1)
    small = max_scale <= thresholds.percent_dense * scene_extent
    clone = high & small
    split = high & ~small

    new = {}
    if clone.any():
        new_clone = {name: getattr(model, name)[clone].copy() for name in ("means", "quats", "log_scales", "opacity_logits", "colors")}
        new = new_clone
    if split.any():
        idx = np.flatnonzero(split)
        rot = quat_to_rotmat(model.quats[idx])
        samples = []
        for _ in range(2):
            local = rng.normal(size=(len(idx), 3)) * model.scales[idx]
            samples.append(model.means[idx] + np.einsum("nij,nj->ni", rot, local))
        split_new = {
            "means": np.concatenate(samples),
            "quats": np.tile(model.quats[idx], (2, 1)),
            "log_scales": np.tile(model.log_scales[idx] - np.log(thresholds.split_factor), (2, 1)),
            "opacity_logits": np.tile(model.opacity_logits[idx], 2),
            "colors": np.tile(model.colors[idx], (2, 1)),
        }
        new = split_new if not new else {k: np.concatenate([new[k], split_new[k]]) for k in new}
    if new:
        model.append(**new)
    keep = np.ones(len(model), dtype=bool)
    keep[:n][split] = False
    keep &= model.opacities >= thresholds.prune_opacity
    model.keep(keep)
    return model
