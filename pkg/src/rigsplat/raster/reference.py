"""Brute-force renderer: every pixel blends every splat after one global depth sort.

No tiling and no bounding radii, so it is an independent check on the binned
renderers. Pixels are processed in parallel with numpy, splats sequentially.
"""

from __future__ import annotations

import numpy as np

from .project import ALPHA_MAX, ALPHA_MIN, T_MIN, ProjectedBatch, depth_order


def _blend(batch: ProjectedBatch, width: int, height: int, record: bool = False):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    conic = batch.conic
    codes = np.zeros((len(batch), height, width), dtype=np.int8) if record else None
    for i in depth_order(batch):
        ca, cb, cc = conic[i]
        dx = xs - batch.mean2d[i, 0]
        dy = ys - batch.mean2d[i, 1]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        raw = batch.opacity[i] * np.exp(power)
        alpha = np.minimum(ALPHA_MAX, raw)
        active = ~done & (alpha >= ALPHA_MIN)
        test_t = trans * (1.0 - alpha)
        stop = active & (test_t < T_MIN)
        contrib = active & ~stop
        if record:
            c = np.where(done, 0, np.where(active, 2, 1))
            c = np.where(contrib & (raw > ALPHA_MAX), 3, c)
            codes[i] = np.where(stop, 4, c)
        done |= stop
        w = np.where(contrib, alpha * trans, 0.0)
        image += w[..., None] * batch.color[i]
        trans = np.where(contrib, test_t, trans)
    return image, trans, codes


def render_reference(batch: ProjectedBatch, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    image, trans, _ = _blend(batch, width, height)
    return image, trans


def blend_signature(batch: ProjectedBatch, width: int, height: int) -> np.ndarray:
    """Per (splat, pixel) blending decision: not reached, skipped, blended, capped, terminated.

    Two scenes with equal signatures lie on the same smooth piece of the renderer.
    """
    return _blend(batch, width, height, record=True)[2]
