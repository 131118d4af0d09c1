"""Per-pixel compositing kernels (numba).

Both passes walk the same depth-sorted per-tile lists with the same cutoffs, so the
backward pass differentiates exactly the function the forward pass computes. Tiles are
processed sequentially and per-tile gradient buffers are flushed in tile order, which makes
every pass bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TILE = 16
# Mahalanobis cutoff (3 sigma). The footprint exp(-q/2) has its tangent line at the cutoff
# subtracted and is renormalized to peak 1, so alpha and its slope reach zero at the boundary
# (finite differences stay exact for pixels straddling the edge).
Q_CUT = 9.0
E_CUT = math.exp(-0.5 * Q_CUT)
E_NORM = 1.0 / (1.0 - E_CUT * (1.0 + 0.5 * Q_CUT))
ALPHA_MAX = 0.99
T_MIN = 1e-4


@njit(cache=True, inline="always")
def footprint(q):
    return (math.exp(-0.5 * q) - E_CUT * (1.0 + 0.5 * (Q_CUT - q))) * E_NORM


@njit(cache=True, inline="always")
def footprint_slope(ex):
    """d footprint / dq given ex = exp(-q/2)."""
    return -0.5 * (ex - E_CUT) * E_NORM


@njit(cache=True)
def _gather(s, e, ids, means2d, conics, opacity, colors):
    cnt = e - s
    buf = np.empty((cnt, 9))
    for j in range(cnt):
        k = ids[s + j]
        buf[j, 0] = means2d[k, 0]
        buf[j, 1] = means2d[k, 1]
        buf[j, 2] = conics[k, 0]
        buf[j, 3] = conics[k, 1]
        buf[j, 4] = conics[k, 2]
        buf[j, 5] = opacity[k]
        buf[j, 6] = colors[k, 0]
        buf[j, 7] = colors[k, 1]
        buf[j, 8] = colors[k, 2]
    return buf


@njit(cache=True)
def forward_kernel(tile_start, tile_end, ids, means2d, conics, opacity, colors, bg,
                   width, height, tiles_x, image, final_t, n_contrib):
    """Front-to-back compositing; ``n_contrib`` stores one past the last contributing entry (tile-local)."""
    for t in range(tile_start.shape[0]):
        x0 = (t % tiles_x) * TILE
        y0 = (t // tiles_x) * TILE
        s = tile_start[t]
        cnt = tile_end[t] - s
        buf = _gather(s, tile_end[t], ids, means2d, conics, opacity, colors)
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last = 0
                for j in range(cnt):
                    dx = px - buf[j, 0]
                    dy = py - buf[j, 1]
                    q = buf[j, 2] * dx * dx + 2.0 * buf[j, 3] * dx * dy + buf[j, 4] * dy * dy
                    if q >= Q_CUT:
                        continue
                    alpha = buf[j, 5] * footprint(q)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    test_t = trans * (1.0 - alpha)
                    if test_t < T_MIN:
                        break
                    w = alpha * trans
                    r += buf[j, 6] * w
                    g += buf[j, 7] * w
                    b += buf[j, 8] * w
                    trans = test_t
                    last = j + 1
                image[py, px, 0] = r + trans * bg[0]
                image[py, px, 1] = g + trans * bg[1]
                image[py, px, 2] = b + trans * bg[2]
                final_t[py, px] = trans
                n_contrib[py, px] = last


@njit(cache=True)
def backward_kernel(tile_start, tile_end, ids, means2d, conics, opacity, colors, bg,
                    width, height, tiles_x, final_t, n_contrib, dl_dimg,
                    d_means2d, d_conics, d_opacity, d_colors):
    for t in range(tile_start.shape[0]):
        x0 = (t % tiles_x) * TILE
        y0 = (t // tiles_x) * TILE
        s = tile_start[t]
        cnt = tile_end[t] - s
        if cnt == 0:
            continue
        buf = _gather(s, tile_end[t], ids, means2d, conics, opacity, colors)
        # per-entry gradients: mean2d (2), conic (3), opacity, color (3)
        acc = np.zeros((cnt, 9))
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                g0 = dl_dimg[py, px, 0]
                g1 = dl_dimg[py, px, 1]
                g2 = dl_dimg[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                t_final = final_t[py, px]
                trans = t_final
                bg_dot = bg[0] * g0 + bg[1] * g1 + bg[2] * g2
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                last_alpha = 0.0
                lc0 = 0.0
                lc1 = 0.0
                lc2 = 0.0
                for j in range(n_contrib[py, px] - 1, -1, -1):
                    dx = px - buf[j, 0]
                    dy = py - buf[j, 1]
                    ca = buf[j, 2]
                    cb = buf[j, 3]
                    cc = buf[j, 4]
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q >= Q_CUT:
                        continue
                    op = buf[j, 5]
                    fp = footprint(q)
                    alpha = op * fp
                    clamped = alpha > ALPHA_MAX
                    if clamped:
                        alpha = ALPHA_MAX
                    trans = trans / (1.0 - alpha)
                    w = alpha * trans
                    acc[j, 6] += w * g0
                    acc[j, 7] += w * g1
                    acc[j, 8] += w * g2
                    acc0 = last_alpha * lc0 + (1.0 - last_alpha) * acc0
                    acc1 = last_alpha * lc1 + (1.0 - last_alpha) * acc1
                    acc2 = last_alpha * lc2 + (1.0 - last_alpha) * acc2
                    lc0 = buf[j, 6]
                    lc1 = buf[j, 7]
                    lc2 = buf[j, 8]
                    last_alpha = alpha
                    if clamped:
                        continue
                    dl_dalpha = trans * ((lc0 - acc0) * g0 + (lc1 - acc1) * g1 + (lc2 - acc2) * g2)
                    dl_dalpha -= t_final / (1.0 - alpha) * bg_dot
                    acc[j, 5] += dl_dalpha * fp
                    dl_dq = dl_dalpha * op * footprint_slope(math.exp(-0.5 * q))
                    acc[j, 0] += -2.0 * dl_dq * (ca * dx + cb * dy)
                    acc[j, 1] += -2.0 * dl_dq * (cb * dx + cc * dy)
                    acc[j, 2] += dl_dq * dx * dx
                    acc[j, 3] += 2.0 * dl_dq * dx * dy
                    acc[j, 4] += dl_dq * dy * dy
        for j in range(cnt):
            k = ids[s + j]
            d_means2d[k, 0] += acc[j, 0]
            d_means2d[k, 1] += acc[j, 1]
            d_conics[k, 0] += acc[j, 2]
            d_conics[k, 1] += acc[j, 3]
            d_conics[k, 2] += acc[j, 4]
            d_opacity[k] += acc[j, 5]
            d_colors[k, 0] += acc[j, 6]
            d_colors[k, 1] += acc[j, 7]
            d_colors[k, 2] += acc[j, 8]


def empty_outputs(height: int, width: int):
    return (
        np.zeros((height, width, 3)),
        np.ones((height, width)),
        np.zeros((height, width), dtype=np.int64),
    )
