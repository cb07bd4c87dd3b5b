"""Pure-numpy tile kernels; same contract as the compiled ``_kernels`` module."""

from __future__ import annotations

import numpy as np

from .project import ALPHA_MAX, ALPHA_MIN, T_MIN, TILE


def _tile_pixels(tx, ty, width, height):
    x0, y0 = tx * TILE, ty * TILE
    x1, y1 = min(x0 + TILE, width), min(y0 + TILE, height)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return x0, x1, y0, y1, xs.astype(np.float64), ys.astype(np.float64)


def forward(mean2d, conic, color, opacity, offsets, items, width, height, tiles_x):
    image = np.zeros((height, width, 3))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    tiles_y = (len(offsets) - 1) // tiles_x
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = ty * tiles_x + tx
            lo, hi = offsets[tile], offsets[tile + 1]
            if lo == hi:
                continue
            x0, x1, y0, y1, xs, ys = _tile_pixels(tx, ty, width, height)
            acc = np.zeros(xs.shape + (3,))
            trans = np.ones(xs.shape)
            done = np.zeros(xs.shape, dtype=bool)
            last = np.zeros(xs.shape, dtype=np.int64)
            for k in range(lo, hi):
                i = items[k]
                dx = xs - mean2d[i, 0]
                dy = ys - mean2d[i, 1]
                power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                alpha = np.minimum(ALPHA_MAX, opacity[i] * np.exp(power))
                active = ~done & (alpha >= ALPHA_MIN)
                test_t = trans * (1.0 - alpha)
                stop = active & (test_t < T_MIN)
                contrib = active & ~stop
                done |= stop
                acc += np.where(contrib, alpha * trans, 0.0)[..., None] * color[i]
                trans = np.where(contrib, test_t, trans)
                last = np.where(contrib, k - lo + 1, last)
                if done.all():
                    break
            image[y0:y1, x0:x1] = acc
            final_t[y0:y1, x0:x1] = trans
            n_contrib[y0:y1, x0:x1] = last
    return image, final_t, n_contrib


def backward(mean2d, conic, color, opacity, offsets, items, width, height, tiles_x,
             grad_image, final_t, n_contrib):
    m = len(opacity)
    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_color = np.zeros((m, 3))
    d_opacity = np.zeros(m)
    tiles_y = (len(offsets) - 1) // tiles_x
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = ty * tiles_x + tx
            lo, hi = offsets[tile], offsets[tile + 1]
            if lo == hi:
                continue
            x0, x1, y0, y1, xs, ys = _tile_pixels(tx, ty, width, height)
            g = grad_image[y0:y1, x0:x1]
            last = n_contrib[y0:y1, x0:x1]
            trans = final_t[y0:y1, x0:x1].copy()
            behind = np.zeros(xs.shape + (3,))
            for k in range(hi - 1, lo - 1, -1):
                i = items[k]
                dx = xs - mean2d[i, 0]
                dy = ys - mean2d[i, 1]
                power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                gauss = np.exp(power)
                raw = opacity[i] * gauss
                alpha = np.minimum(ALPHA_MAX, raw)
                active = (k - lo < last) & (alpha >= ALPHA_MIN)
                if not active.any():
                    continue
                trans = np.where(active, trans / (1.0 - alpha), trans)
                w = np.where(active, alpha * trans, 0.0)
                d_color[i] += np.einsum("yx,yxc->c", w, g)
                d_alpha = np.where(active, trans * np.sum((color[i] - behind) * g, axis=-1), 0.0)
                behind = np.where(active[..., None], alpha[..., None] * color[i] + (1.0 - alpha[..., None]) * behind, behind)
                d_alpha = np.where(raw > ALPHA_MAX, 0.0, d_alpha)
                d_opacity[i] += np.sum(d_alpha * gauss)
                d_power = d_alpha * raw
                d_mean[i, 0] += np.sum(d_power * (conic[i, 0] * dx + conic[i, 1] * dy))
                d_mean[i, 1] += np.sum(d_power * (conic[i, 1] * dx + conic[i, 2] * dy))
                d_conic[i, 0] += np.sum(-0.5 * d_power * dx * dx)
                d_conic[i, 1] += np.sum(-d_power * dx * dy)
                d_conic[i, 2] += np.sum(-0.5 * d_power * dy * dy)
    return d_mean, d_conic, d_color, d_opacity
