"""Differentiable splatting rasterizer.

``render`` bins projected splats into 16x16 tiles and blends each tile's list
front to back; ``render_backward`` replays the blend back to front to produce
per-splat gradients. The blend loops live in a compiled extension when it is
available and fall back to numpy otherwise (``RIGSPLAT_BACKEND=python`` forces
the fallback).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..autodiff.tape import Function, register
from ..scene import Camera
from . import _fallback
from .project import (
    ALPHA_MAX,
    ALPHA_MIN,
    DILATION,
    T_MIN,
    TILE,
    Bins,
    ProjectedBatch,
    ProjectedSplat,
    SplatGrads,
    bin_radius,
    bin_splats,
    depth_order,
    project,
    project_backward,
    project_batch,
)
from .reference import blend_signature
from .reference import render_reference as _reference_blend

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

_BACKENDS = {"python": _fallback}
if _kernels is not None:
    _BACKENDS["compiled"] = _kernels


def _initial_backend() -> str:
    wanted = os.environ.get("RIGSPLAT_BACKEND", "auto").lower()
    if wanted == "python" or _kernels is None:
        return "python"
    return "compiled"


BACKEND = _initial_backend()


def set_backend(name: str) -> None:
    """Switch the blend kernels (``"compiled"`` or ``"python"``)."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(_BACKENDS)}")
    BACKEND = name


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


class RenderStateError(RuntimeError):
    """Backward called on an output that kept no forward state."""


@dataclass
class RenderOutput:
    image: np.ndarray
    transmittance: np.ndarray
    batch: ProjectedBatch | None = None
    bins: Bins | None = None
    n_contrib: np.ndarray | None = None
    grads: SplatGrads | None = None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _as_batch(splats) -> ProjectedBatch:
    if isinstance(splats, ProjectedBatch):
        return splats
    return ProjectedBatch.from_splats(list(splats))


def _kernel_args(batch: ProjectedBatch, bins: Bins):
    return (
        np.ascontiguousarray(batch.mean2d, dtype=np.float64),
        np.ascontiguousarray(batch.conic, dtype=np.float64),
        np.ascontiguousarray(batch.color, dtype=np.float64),
        np.ascontiguousarray(batch.opacity, dtype=np.float64),
        np.ascontiguousarray(bins.offsets, dtype=np.int64),
        np.ascontiguousarray(bins.items, dtype=np.int64),
    )


def render(splats, camera: Camera) -> RenderOutput:
    """Tile renderer. ``splats`` is a ProjectedBatch or a list of ProjectedSplat."""
    batch = _as_batch(splats)
    w, h = camera.width, camera.height
    bins = bin_splats(batch, w, h)
    kernel = _BACKENDS[BACKEND]
    image, final_t, n_contrib = kernel.forward(*_kernel_args(batch, bins), w, h, bins.tiles_x)
    return RenderOutput(np.asarray(image), np.asarray(final_t), batch, bins, np.asarray(n_contrib))


def render_backward(output_grad: np.ndarray, output: RenderOutput) -> SplatGrads:
    """Per-splat gradients of ``sum(output_grad * output.image)``; stored on ``output.grads`` too."""
    if output.batch is None or output.bins is None or output.n_contrib is None:
        raise RenderStateError("render_backward needs the state kept by render()")
    grad = np.ascontiguousarray(output_grad, dtype=np.float64)
    if grad.shape != output.image.shape:
        raise ValueError(f"output_grad shape {grad.shape} != image shape {output.image.shape}")
    kernel = _BACKENDS[BACKEND]
    d_mean, d_conic, d_color, d_opacity = kernel.backward(
        *_kernel_args(output.batch, output.bins), output.width, output.height, output.bins.tiles_x,
        grad, np.ascontiguousarray(output.transmittance), np.ascontiguousarray(output.n_contrib),
    )
    output.grads = SplatGrads(np.asarray(d_mean), np.asarray(d_conic), np.asarray(d_color), np.asarray(d_opacity))
    return output.grads


def render_reference(splats, camera: Camera) -> RenderOutput:
    """Untiled oracle: one global sort, every splat tested at every pixel."""
    batch = _as_batch(splats)
    image, trans = _reference_blend(batch, camera.width, camera.height)
    return RenderOutput(image, trans)


def render_gaussians(positions, cov3d, colors, opacities, camera: Camera, reference: bool = False) -> RenderOutput:
    batch = project_batch(positions, cov3d, camera, colors, opacities)
    return render_reference(batch, camera) if reference else render(batch, camera)


# -- tape op -----------------------------------------------------------------------


def _gate_camera(size: int = 16) -> Camera:
    # roughly one world unit per pixel, so covariance entries are O(1) next to the FD step
    f = 0.25 * size
    return Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size,
                  world_to_camera=np.eye(4))


def _random_scene(rng, n: int):
    from ..scene import covariance_from_params

    positions = np.column_stack([rng.uniform(-2.5, 2.5, n), rng.uniform(-2.5, 2.5, n), rng.uniform(3.0, 5.0, n)])
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    cov = covariance_from_params(quats, rng.uniform(np.log(0.4), np.log(1.6), (n, 3)))
    colors = rng.uniform(0.0, 1.0, (n, 3))
    opacities = rng.uniform(0.2, 0.9, n)
    return [positions, cov, colors, opacities]


def _smooth_at(inputs, camera: Camera, h: float) -> bool:
    """True when no +-h perturbation of any input changes a blending decision."""
    def signature():
        pos, cov, col, op = inputs
        return blend_signature(project_batch(pos, cov, camera, col, op), camera.width, camera.height)

    base = signature()
    for k, arr in enumerate(inputs):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            for step in (h, -h):
                flat[j] = orig + step
                sig = signature()
                if sig.shape != base.shape or not np.array_equal(sig, base):
                    flat[j] = orig
                    return False
            flat[j] = orig
    return True


@register
class Rasterize(Function):
    """World-space Gaussians -> image, with the hand-derived adjoint.

    Inputs: positions (N, 3), covariances (N, 3, 3), colors (N, 3), opacities (N,).
    ``stats``, if given, is a dict that receives the pixel-space gradient of each
    projected mean in backward: ``mean2d_grad`` (N, 2) and its norm ``mean2d_grad_norm``.
    """

    name = "rasterize"
    fd_step = 1e-4

    @staticmethod
    def forward(ctx, positions, cov3d, colors, opacities, camera: Camera, stats: dict | None = None):
        n = len(positions)
        if cov3d.shape != (n, 3, 3) or colors.shape != (n, 3) or opacities.shape != (n,):
            raise ValueError("rasterize expects (N,3), (N,3,3), (N,3), (N,) inputs")
        batch = project_batch(positions, cov3d, camera, colors, opacities)
        out = render(batch, camera)
        ctx.save(out, camera, n, stats)
        return out.image

    @staticmethod
    def backward(ctx, grad):
        out, camera, n, stats = ctx.saved
        grads = render_backward(grad, out)
        d_pos, d_cov, d_col, d_op = project_backward(out.batch, grads, camera, n)
        if stats is not None:
            vec = np.zeros((n, 2))
            vec[out.batch.source_index] = grads.mean2d
            stats["mean2d_grad"] = vec
            stats["mean2d_grad_norm"] = np.linalg.norm(vec, axis=1)
            visible = np.zeros(n, dtype=bool)
            visible[out.batch.source_index] = True
            stats["visible"] = visible
        return d_pos, d_cov, d_col, d_op

    @staticmethod
    def sample(rng):
        camera = _gate_camera()
        while True:
            inputs = _random_scene(rng, int(rng.integers(1, 9)))
            if _smooth_at(inputs, camera, Rasterize.fd_step):
                return inputs, {"camera": camera}


def rasterize(positions, cov3d, colors, opacities, camera: Camera, stats: dict | None = None):
    return Rasterize.apply(positions, cov3d, colors, opacities, camera=camera, stats=stats)


__all__ = [
    "ALPHA_MAX",
    "ALPHA_MIN",
    "BACKEND",
    "DILATION",
    "T_MIN",
    "TILE",
    "Bins",
    "ProjectedBatch",
    "ProjectedSplat",
    "Rasterize",
    "RenderOutput",
    "RenderStateError",
    "SplatGrads",
    "available_backends",
    "bin_radius",
    "bin_splats",
    "blend_signature",
    "depth_order",
    "project",
    "project_backward",
    "project_batch",
    "rasterize",
    "render",
    "render_backward",
    "render_gaussians",
    "render_reference",
    "set_backend",
]
