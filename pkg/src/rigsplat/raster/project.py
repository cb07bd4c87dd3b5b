"""EWA projection of 3D Gaussians to screen-space splats, and its adjoint.

Pixel centres sit at integer coordinates. The projected covariance is
``J W S W^T J^T + 0.3 I`` with ``J`` the perspective Jacobian at the camera-space mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..scene import Camera

DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
TILE = 16


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity: float = 1.0
    source_index: int = 0


@dataclass
class ProjectedBatch:
    """Struct-of-arrays form of visible splats; row ``i`` came from ``source_index[i]``."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    source_index: np.ndarray
    # kept for the adjoint
    cam_points: np.ndarray | None = None
    jacobian: np.ndarray | None = None
    world_cov: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def conic(self) -> np.ndarray:
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        return np.stack([c / det, -b / det, a / det], axis=1)

    def splats(self) -> list[ProjectedSplat]:
        return [
            ProjectedSplat(self.mean2d[i], self.cov2d[i], float(self.depth[i]), self.color[i],
                           float(self.opacity[i]), int(self.source_index[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_splats(cls, splats: list[ProjectedSplat]) -> "ProjectedBatch":
        if not splats:
            return cls.empty()
        return cls(
            mean2d=np.array([s.mean2d for s in splats], dtype=np.float64).reshape(-1, 2),
            cov2d=np.array([s.cov2d for s in splats], dtype=np.float64).reshape(-1, 2, 2),
            depth=np.array([s.depth for s in splats], dtype=np.float64),
            color=np.array([s.color for s in splats], dtype=np.float64).reshape(-1, 3),
            opacity=np.array([s.opacity for s in splats], dtype=np.float64),
            source_index=np.array([s.source_index for s in splats], dtype=np.int64),
        )

    @classmethod
    def empty(cls) -> "ProjectedBatch":
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
                   np.zeros(0, dtype=np.int64))


def _jacobian(cam: Camera, p: np.ndarray) -> np.ndarray:
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    zero = np.zeros_like(z)
    j = np.stack(
        [cam.fx / z, zero, -cam.fx * x / (z * z), zero, cam.fy / z, -cam.fy * y / (z * z)], axis=1
    )
    return j.reshape(-1, 2, 3)


def project_batch(positions, cov3d, camera: Camera, colors=None, opacities=None) -> ProjectedBatch:
    """Project every Gaussian in front of the near plane."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(-1, 3, 3)
    n = len(positions)
    colors = np.zeros((n, 3)) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    opacities = np.ones(n) if opacities is None else np.asarray(opacities, dtype=np.float64).reshape(-1)
    rot = camera.rotation
    p = positions @ rot.T + camera.translation
    keep = np.nonzero(p[:, 2] > camera.near_clip)[0]
    p = p[keep]
    j = _jacobian(camera, p)
    t = j @ rot
    c2 = t @ cov3d[keep] @ np.swapaxes(t, 1, 2)
    off = 0.5 * (c2[:, 0, 1] + c2[:, 1, 0])
    cov2d = np.empty_like(c2)
    cov2d[:, 0, 0] = c2[:, 0, 0] + DILATION
    cov2d[:, 1, 1] = c2[:, 1, 1] + DILATION
    cov2d[:, 0, 1] = off
    cov2d[:, 1, 0] = off
    mean2d = np.stack([camera.fx * p[:, 0] / p[:, 2] + camera.cx, camera.fy * p[:, 1] / p[:, 2] + camera.cy], axis=1)
    return ProjectedBatch(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=p[:, 2].copy(),
        color=colors[keep],
        opacity=opacities[keep],
        source_index=keep.astype(np.int64),
        cam_points=p,
        jacobian=j,
        world_cov=cov3d[keep],
    )


def project(position, cov3d, camera: Camera, color=None, opacity: float = 1.0,
            source_index: int = 0) -> ProjectedSplat | None:
    """Project a single Gaussian; ``None`` when it lies behind the near plane."""
    batch = project_batch(
        np.reshape(position, (1, 3)), np.reshape(cov3d, (1, 3, 3)), camera,
        None if color is None else np.reshape(color, (1, 3)), np.array([opacity]),
    )
    if len(batch) == 0:
        return None
    s = batch.splats()[0]
    s.source_index = source_index
    return s


def bin_radius(cov2d: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Pixel radius beyond which ``opacity * G < 1/255``; 0 for splats that never contribute.

    The bound uses the larger eigenvalue of the 2D covariance, so it contains the
    whole region where a splat can pass the alpha threshold.
    """
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    level = 2.0 * np.log(np.maximum(opacity, 1e-300) * 255.0)
    r = np.sqrt(lam * np.maximum(level, 0.0))
    return np.where(level > 0, r * (1.0 + 1e-9) + 1e-9, 0.0)


@dataclass
class Bins:
    """Per-tile splat lists, each sorted front to back (depth, then source index)."""

    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (tiles + 1,)
    items: np.ndarray    # splat rows into the ProjectedBatch


def depth_order(batch: ProjectedBatch) -> np.ndarray:
    return np.lexsort((batch.source_index, batch.depth))


def bin_splats(batch: ProjectedBatch, width: int, height: int) -> Bins:
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    if len(batch) == 0:
        return Bins(tiles_x, tiles_y, np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))
    r = bin_radius(batch.cov2d, batch.opacity)
    mx, my = batch.mean2d[:, 0], batch.mean2d[:, 1]
    px0 = np.clip(np.ceil(mx - r), 0, width)
    px1 = np.clip(np.floor(mx + r), -1, width - 1)
    py0 = np.clip(np.ceil(my - r), 0, height)
    py1 = np.clip(np.floor(my + r), -1, height - 1)
    live = (r > 0) & (px1 >= px0) & (py1 >= py0)
    tx0 = np.where(live, px0 // TILE, 0).astype(np.int64)
    tx1 = np.where(live, px1 // TILE + 1, 0).astype(np.int64)
    ty0 = np.where(live, py0 // TILE, 0).astype(np.int64)
    ty1 = np.where(live, py1 // TILE + 1, 0).astype(np.int64)
    nx, ny = tx1 - tx0, ty1 - ty0
    counts = nx * ny
    rank = np.empty(len(batch), dtype=np.int64)
    rank[depth_order(batch)] = np.arange(len(batch))
    splat = np.repeat(np.arange(len(batch)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile = (ty0[splat] + local // nx[splat]) * tiles_x + tx0[splat] + local % nx[splat]
    order = np.lexsort((rank[splat], tile))
    items = splat[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=n_tiles), out=offsets[1:])
    return Bins(tiles_x, tiles_y, offsets, items)


@dataclass
class SplatGrads:
    """Per-row gradients of a ProjectedBatch."""

    mean2d: np.ndarray
    conic: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    def cov2d(self, batch: ProjectedBatch) -> np.ndarray:
        """Gradient w.r.t. the dilated 2D covariance, as a symmetric matrix."""
        q = batch.conic
        gq = np.empty((len(q), 2, 2))
        gq[:, 0, 0] = self.conic[:, 0]
        gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * self.conic[:, 1]
        gq[:, 1, 1] = self.conic[:, 2]
        qm = np.empty_like(gq)
        qm[:, 0, 0], qm[:, 0, 1], qm[:, 1, 0], qm[:, 1, 1] = q[:, 0], q[:, 1], q[:, 1], q[:, 2]
        return -(qm @ gq @ qm)


def project_backward(batch: ProjectedBatch, grads: SplatGrads, camera: Camera, n: int):
    """Chain splat gradients back to world positions and 3D covariances.

    Returns full-length ``(d_positions, d_cov3d, d_colors, d_opacities)`` arrays; culled
    Gaussians receive zeros.
    """
    rot = camera.rotation
    p, j, sigma = batch.cam_points, batch.jacobian, batch.world_cov
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = camera.fx, camera.fy
    gc = grads.cov2d(batch)
    t = j @ rot
    d_sigma = np.swapaxes(t, 1, 2) @ gc @ t
    d_t = gc @ t @ (sigma + np.swapaxes(sigma, 1, 2))
    d_j = d_t @ rot.T
    gu, gv = grads.mean2d[:, 0], grads.mean2d[:, 1]
    z2 = z * z
    z3 = z2 * z
    d_p = np.empty_like(p)
    d_p[:, 0] = gu * fx / z - d_j[:, 0, 2] * fx / z2
    d_p[:, 1] = gv * fy / z - d_j[:, 1, 2] * fy / z2
    d_p[:, 2] = (
        -gu * fx * x / z2 - gv * fy * y / z2
        - d_j[:, 0, 0] * fx / z2 + d_j[:, 0, 2] * 2 * fx * x / z3
        - d_j[:, 1, 1] * fy / z2 + d_j[:, 1, 2] * 2 * fy * y / z3
    )
    idx = batch.source_index
    d_pos = np.zeros((n, 3))
    d_cov = np.zeros((n, 3, 3))
    d_col = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_pos[idx] = d_p @ rot
    d_cov[idx] = d_sigma
    d_col[idx] = grads.color
    d_op[idx] = grads.opacity
    return d_pos, d_cov, d_col, d_op
