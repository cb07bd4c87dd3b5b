"""Core scene types: Gaussian clouds, pinhole cameras and frame records.

Quaternions are stored scalar-first, ``(w, x, y, z)``. Camera space follows the
OpenCV convention: +x right, +y down, +z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class SourceTag(IntEnum):
    MESH = 0
    BACKGROUND = 1
    DENSIFIED = 2


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (normalised) quaternions, shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix` with ``w >= 0`` (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[n] = q if q[0] >= 0 else -q
    return out.reshape(m.shape[:-2] + (4,))


def axis_angle_to_matrix(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for rotation vectors, shape (..., 3) -> (..., 3, 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    k = skew(omega)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    x, y, z = np.moveaxis(v, -1, 0)
    zero = np.zeros_like(x)
    return np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(v.shape[:-1] + (3, 3))


def covariance_from_params(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """``R diag(exp(ls))^2 R^T`` for a quaternion and a log-scale 3-vector.

    Works batched over leading dimensions.
    """
    r = quat_to_matrix(rotation)
    m = r * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class GaussianCloud:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    source_tag: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        if n < 1:
            raise ValueError("GaussianCloud needs at least one Gaussian")
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "colors": (n, 3),
            "source_tag": (n,),
        }
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-np.asarray(self.opacity_logits, dtype=np.float64)))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scales, dtype=np.float64))

    def covariances(self) -> np.ndarray:
        return covariance_from_params(self.rotations, self.log_scales)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            name: np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors")
        }
        out["source_tag"] = np.ascontiguousarray(self.source_tag, dtype=np.int32)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "GaussianCloud":
        return cls(**{k: np.array(arrays[k]) for k in (
            "positions", "rotations", "log_scales", "opacity_logits", "colors", "source_tag")})

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(**{k: v[keep] for k, v in self.to_arrays().items()})


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near_clip: float = 0.01

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rot = self.world_to_camera[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("world_to_camera rotation block is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, *, fx, fy, cx, cy, width, height, near_clip=0.01) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        return cls(fx, fy, cx, cy, width, height, w2c, near_clip)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "world_to_camera": [float(v) for v in self.world_to_camera.ravel()],
            "near_clip": float(self.near_clip),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
            np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
            float(d.get("near_clip", 0.01)),
        )


@dataclass
class FrameRecord:
    image: np.ndarray
    camera: Camera
    gamma_exp: np.ndarray
    gamma_pose: np.ndarray
    frame_index: int
    split: str = "train"
    camera_index: int = -1
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.gamma_exp = np.asarray(self.gamma_exp, dtype=np.float64)
        self.gamma_pose = np.asarray(self.gamma_pose, dtype=np.float64)
        if self.gamma_pose.shape != (4,):
            raise ValueError(f"gamma_pose must have 4 entries, got {self.gamma_pose.shape}")
