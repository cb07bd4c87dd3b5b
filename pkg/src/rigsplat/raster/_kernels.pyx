# cython: language_level=3
"""Compiled tile kernels for forward blending and its adjoint.

Same contract as ``_fallback``: splat rows are addressed through per-tile lists
(``offsets``/``items``) already sorted front to back.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

cdef int TILE = 16
cdef double ALPHA_MIN = 1.0 / 255.0
cdef double ALPHA_MAX = 0.99
cdef double T_MIN = 1e-4


def forward(double[:, ::1] mean2d, double[:, ::1] conic, double[:, ::1] color,
            double[::1] opacity, long[::1] offsets, long[::1] items,
            int width, int height, int tiles_x):
    cdef cnp.ndarray[double, ndim=3] image_arr = np.zeros((height, width, 3))
    cdef cnp.ndarray[double, ndim=2] final_arr = np.ones((height, width))
    cdef cnp.ndarray[long, ndim=2] contrib_arr = np.zeros((height, width), dtype=np.int64)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] final_t = final_arr
    cdef long[:, ::1] n_contrib = contrib_arr
    cdef int tiles_y = (offsets.shape[0] - 1) // tiles_x
    cdef int tx, ty, px, py, x0, y0, x1, y1
    cdef long tile, lo, hi, k, i, last
    cdef double t, alpha, test_t, dx, dy, power, r, g, b
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = ty * tiles_x + tx
            lo = offsets[tile]
            hi = offsets[tile + 1]
            if lo == hi:
                continue
            x0 = tx * TILE
            y0 = ty * TILE
            x1 = min(x0 + TILE, width)
            y1 = min(y0 + TILE, height)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    t = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    last = 0
                    for k in range(lo, hi):
                        i = items[k]
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                        alpha = opacity[i] * exp(power)
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        if alpha < ALPHA_MIN:
                            continue
                        test_t = t * (1.0 - alpha)
                        if test_t < T_MIN:
                            break
                        r += color[i, 0] * alpha * t
                        g += color[i, 1] * alpha * t
                        b += color[i, 2] * alpha * t
                        t = test_t
                        last = k - lo + 1
                    image[py, px, 0] = r
                    image[py, px, 1] = g
                    image[py, px, 2] = b
                    final_t[py, px] = t
                    n_contrib[py, px] = last
    return image_arr, final_arr, contrib_arr


def backward(double[:, ::1] mean2d, double[:, ::1] conic, double[:, ::1] color,
             double[::1] opacity, long[::1] offsets, long[::1] items,
             int width, int height, int tiles_x,
             double[:, :, ::1] grad_image, double[:, ::1] final_t, long[:, ::1] n_contrib):
    cdef Py_ssize_t m = opacity.shape[0]
    cdef cnp.ndarray[double, ndim=2] d_mean_arr = np.zeros((m, 2))
    cdef cnp.ndarray[double, ndim=2] d_conic_arr = np.zeros((m, 3))
    cdef cnp.ndarray[double, ndim=2] d_color_arr = np.zeros((m, 3))
    cdef cnp.ndarray[double, ndim=1] d_opacity_arr = np.zeros(m)
    cdef double[:, ::1] d_mean = d_mean_arr
    cdef double[:, ::1] d_conic = d_conic_arr
    cdef double[:, ::1] d_color = d_color_arr
    cdef double[::1] d_opacity = d_opacity_arr
    cdef int tiles_y = (offsets.shape[0] - 1) // tiles_x
    cdef int tx, ty, px, py, x0, y0, x1, y1
    cdef long tile, lo, hi, k, i
    cdef double t, alpha, raw, gauss, dx, dy, power, w, d_alpha, d_power
    cdef double g0, g1, g2, b0, b1, b2
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = ty * tiles_x + tx
            lo = offsets[tile]
            hi = offsets[tile + 1]
            if lo == hi:
                continue
            x0 = tx * TILE
            y0 = ty * TILE
            x1 = min(x0 + TILE, width)
            y1 = min(y0 + TILE, height)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    t = final_t[py, px]
                    g0 = grad_image[py, px, 0]
                    g1 = grad_image[py, px, 1]
                    g2 = grad_image[py, px, 2]
                    b0 = 0.0
                    b1 = 0.0
                    b2 = 0.0
                    for k in range(lo + n_contrib[py, px] - 1, lo - 1, -1):
                        i = items[k]
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                        gauss = exp(power)
                        raw = opacity[i] * gauss
                        alpha = raw if raw < ALPHA_MAX else ALPHA_MAX
                        if alpha < ALPHA_MIN:
                            continue
                        t = t / (1.0 - alpha)
                        w = alpha * t
                        d_color[i, 0] += w * g0
                        d_color[i, 1] += w * g1
                        d_color[i, 2] += w * g2
                        d_alpha = t * ((color[i, 0] - b0) * g0 + (color[i, 1] - b1) * g1 + (color[i, 2] - b2) * g2)
                        b0 = alpha * color[i, 0] + (1.0 - alpha) * b0
                        b1 = alpha * color[i, 1] + (1.0 - alpha) * b1
                        b2 = alpha * color[i, 2] + (1.0 - alpha) * b2
                        if raw > ALPHA_MAX:
                            continue
                        d_opacity[i] += d_alpha * gauss
                        d_power = d_alpha * raw
                        d_mean[i, 0] += d_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                        d_mean[i, 1] += d_power * (conic[i, 1] * dx + conic[i, 2] * dy)
                        d_conic[i, 0] += -0.5 * d_power * dx * dx
                        d_conic[i, 1] += -d_power * dx * dy
                        d_conic[i, 2] += -0.5 * d_power * dy * dy
    return d_mean_arr, d_conic_arr, d_color_arr, d_opacity_arr
