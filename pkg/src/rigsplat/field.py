"""Mesh-driven deformation of canonical Gaussians.

Each Gaussian is tied to its K nearest canonical mesh vertices. For a frame with
expression/pose parameters the field produces

* a displacement: weighted vertex displacements plus a corrective offset and a
  per-frame offset (learnable mode), or the alternatives used for comparison
  (``fixed``: distance-decayed IDW displacement plus an MLP; ``none``: an MLP alone);
* a rotation ``R_mesh @ R*`` applied on the world side of the canonical rotation,
  where ``R_mesh`` is the Kabsch rotation of the neighbour vertices;
* a log-scale offset ``s_raw`` (scale factor ``exp(s_raw)``).

All output layers start at zero, so a fresh field moves near-mesh Gaussians with
the IDW average of their neighbours and leaves far ones exactly where they are.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .autodiff import ops
from .autodiff.tape import Tensor
from .mesh import MorphableMesh, evaluate_mesh, idw_weights, kabsch
from .scene import matrix_to_quat, quat_to_matrix

log = logging.getLogger(__name__)

PRIOR_MODES = ("learnable", "fixed", "none")
T_CODE_DIM = 16


class FrameIndexError(KeyError):
    pass


@dataclass
class DeformationConfig:
    K: int = 10
    D: float | None = None  # None -> d_ratio * mesh bounding radius
    d_ratio: float = 0.15
    pe_freqs_pos: int = 10
    pe_freqs_def: int = 4
    triplane_resolution: int = 64
    triplane_channels: int = 16
    mlp_hidden: int = 64
    softplus_beta: float = 10.0
    prior_mode: str = "learnable"

    def __post_init__(self):
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.D is not None and self.D <= 0:
            raise ValueError("D must be positive")
        for name in ("triplane_resolution", "triplane_channels", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.triplane_resolution < 2:
            raise ValueError("triplane_resolution must be >= 2 for bilinear lookup")

    def threshold(self, mesh: MorphableMesh) -> float:
        return float(self.D) if self.D is not None else self.d_ratio * mesh.bounding_radius

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encode(x, n_freqs: int) -> np.ndarray:
    """``x`` followed by ``sin(2^l pi x), cos(2^l pi x)`` for each level l < n_freqs.

    Within a level the sin/cos pair of each component sits side by side, so an
    n-vector becomes ``n + 2 n L`` values.
    """
    x = np.asarray(x, dtype=np.float64)
    if n_freqs < 0:
        raise ValueError("n_freqs must be >= 0")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    parts = [x]
    for level in range(n_freqs):
        arg = (2.0**level) * np.pi * x
        parts.append(np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(x.shape[:-1] + (-1,)))
    out = np.concatenate(parts, axis=-1)
    return out if not scalar else out.reshape(-1)


# -- per-Gaussian anchoring ---------------------------------------------------------


@dataclass
class Anchors:
    """Canonical-space KNN data for a set of points; fixed between densifications."""

    knn_idx: np.ndarray   # (N, K) int
    knn_dist: np.ndarray  # (N, K)
    threshold: float

    @classmethod
    def build(cls, points: np.ndarray, mesh: MorphableMesh, k: int, threshold: float) -> "Anchors":
        idx, dist = mesh.tree.query_batch(np.asarray(points, dtype=np.float64), k)
        return cls(idx, dist, threshold)

    def __len__(self) -> int:
        return len(self.knn_idx)

    @property
    def mesh_distance(self) -> np.ndarray:
        return self.knn_dist[:, 0]

    @property
    def near(self) -> np.ndarray:
        """The mask ``dist < D``."""
        return self.mesh_distance < self.threshold

    @property
    def idw(self) -> np.ndarray:
        return idw_weights(self.knn_dist)

    def subset(self, rows) -> "Anchors":
        return Anchors(self.knn_idx[rows], self.knn_dist[rows], self.threshold)

    @classmethod
    def concat(cls, parts: list["Anchors"]) -> "Anchors":
        return cls(np.concatenate([p.knn_idx for p in parts]), np.concatenate([p.knn_dist for p in parts]),
                   parts[0].threshold)


@dataclass
class FrameMotion:
    """Mesh motion for one (gamma_exp, gamma_pose)."""

    gamma: np.ndarray      # (E + 4,)
    vertices: np.ndarray   # deformed vertices (V, 3)
    delta_v: np.ndarray    # (V, 3)

    @classmethod
    def from_params(cls, mesh: MorphableMesh, gamma_exp, gamma_pose) -> "FrameMotion":
        v = evaluate_mesh(mesh, gamma_exp, gamma_pose)
        gamma = np.concatenate([np.asarray(gamma_exp, dtype=np.float64), np.asarray(gamma_pose, dtype=np.float64)])
        return cls(gamma, v, v - mesh.vertices_can)


@dataclass
class FrameGeometry:
    """Everything about a frame the networks see as constant data."""

    delta_knn: np.ndarray  # (N, K, 3)
    dwavg: np.ndarray      # (N, 3)
    r_mesh: np.ndarray     # (N, 3, 3), identity where gated off
    degenerate: np.ndarray  # (N,) bool


def frame_geometry(mesh: MorphableMesh, anchors: Anchors, motion: FrameMotion, use_mesh_rotation: bool = True,
                   gate: bool = True) -> FrameGeometry:
    delta_knn = motion.delta_v[anchors.knn_idx]
    avg = np.einsum("nk,nkc->nc", anchors.idw, delta_knn)
    n = len(anchors)
    if use_mesh_rotation and anchors.knn_idx.shape[1] >= 3:
        res = kabsch(mesh.vertices_can[anchors.knn_idx], motion.vertices[anchors.knn_idx])
        rot, degenerate = res.rotation, res.degenerate
        if gate:
            rot = np.where(anchors.near[:, None, None], rot, np.eye(3))
    else:
        rot, degenerate = np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros(n, dtype=bool)
    return FrameGeometry(delta_knn, avg, rot, degenerate)


# -- networks ---------------------------------------------------------------------


def _init_mlp(rng, prefix: str, sizes: list[int], params: dict) -> None:
    """Softplus MLP with a zero output layer; hidden layers use a uniform fan-in init."""
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = layer == len(sizes) - 2
        if last:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
        params[f"{prefix}.{layer}.W"] = w.astype(np.float32)
        params[f"{prefix}.{layer}.b"] = np.zeros(fan_out, dtype=np.float32)


def _mlp(tensors: dict, prefix: str, x, beta: float):
    layer = 0
    h = x
    while f"{prefix}.{layer}.W" in tensors:
        if layer > 0:
            h = ops.softplus(h, beta)
        h = ops.affine(h, tensors[f"{prefix}.{layer}.W"], tensors[f"{prefix}.{layer}.b"])
        layer += 1
    return h


@dataclass
class DeformResult:
    positions: Tensor        # (N, 3) deformed means
    rotations: Tensor        # (N, 3, 3) deformed rotation matrices
    log_scales: Tensor       # (N, 3)
    displacement: Tensor     # (N, 3) Def = prior + eta + t
    prior: Tensor | np.ndarray
    eta: Tensor | None
    t: Tensor | None         # (3,) per-frame offset
    r_prime: Tensor          # (N, 3, 3) R_mesh @ R*
    s_raw: Tensor            # (N, 3)
    weights: Tensor | None = None  # (N, K) learnable-mode vertex weights
    degenerate: np.ndarray | None = None


@dataclass
class DeformationField:
    config: DeformationConfig
    n_expressions: int
    box_center: np.ndarray
    box_half: np.ndarray
    threshold: float
    frame_ids: list[int] = dc_field(default_factory=list)
    params: dict[str, np.ndarray] = dc_field(default_factory=dict)

    @classmethod
    def create(cls, config: DeformationConfig, mesh: MorphableMesh, points: np.ndarray,
               frame_ids=(), seed: int = 0) -> "DeformationField":
        points = np.asarray(points, dtype=np.float64)
        lo, hi = points.min(axis=0), points.max(axis=0)
        center = 0.5 * (lo + hi)
        half = np.maximum(0.5 * (hi - lo), 1e-6) * 1.05
        fld = cls(config, mesh.n_expressions, center, half, config.threshold(mesh), [int(i) for i in frame_ids])
        fld._init_params(np.random.default_rng(seed))
        return fld

    # layout --------------------------------------------------------------------

    @property
    def cond_dim(self) -> int:
        """Width of the conditioning vector for G, R*, S* (and M in the comparison modes)."""
        pos = 3 * (1 + 2 * self.config.pe_freqs_pos)
        if self.config.prior_mode == "none":
            return pos + self.n_expressions + 4
        return pos + 3 * (1 + 2 * self.config.pe_freqs_def)

    def _init_params(self, rng) -> None:
        c = self.config
        hid = c.mlp_hidden
        p: dict[str, np.ndarray] = {}
        cond = self.cond_dim
        pos_gamma = 3 * (1 + 2 * c.pe_freqs_pos) + self.n_expressions + 4
        if c.prior_mode == "learnable":
            r, ch = c.triplane_resolution, c.triplane_channels
            p["triplane"] = (0.1 * rng.standard_normal((3, r, r, ch))).astype(np.float32)
            _init_mlp(rng, "F", [3 * ch, hid, c.K], p)
            _init_mlp(rng, "G", [cond, hid, 3], p)
            p["T.codes"] = (0.1 * rng.standard_normal((max(len(self.frame_ids), 1), T_CODE_DIM))).astype(np.float32)
            _init_mlp(rng, "T", [T_CODE_DIM, hid, 3], p)
        else:
            _init_mlp(rng, "M", [pos_gamma, hid, hid, hid, 3], p)
        _init_mlp(rng, "R", [cond, hid, hid, hid, 3], p)
        _init_mlp(rng, "S", [cond, hid, hid, hid, 3], p)
        self.params = p

    def tensors(self, requires_grad: bool = True, dtype=np.float64) -> dict[str, Tensor]:
        return {k: Tensor(v.astype(dtype), requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(x, dtype=np.float64) - self.box_center) / self.box_half, -1.0, 1.0)

    def code_row(self, frame_index: int) -> int:
        try:
            return self.frame_ids.index(int(frame_index))
        except ValueError:
            raise FrameIndexError(f"frame {frame_index} has no per-frame code") from None

    # evaluation ----------------------------------------------------------------

    def _conditioning(self, xn: np.ndarray, geom: FrameGeometry, gamma: np.ndarray) -> np.ndarray:
        pe_x = positional_encode(xn, self.config.pe_freqs_pos)
        if self.config.prior_mode == "none":
            return np.concatenate([pe_x, np.broadcast_to(gamma, (len(xn), len(gamma)))], axis=1)
        return np.concatenate([pe_x, positional_encode(geom.dwavg, self.config.pe_freqs_def)], axis=1)

    def raw_weights(self, tensors: dict, xn: np.ndarray):
        """Triplane lookup followed by the weight head: (N, K)."""
        plane = tensors["triplane"]
        feats = [
            ops.grid_sample(ops.index(plane, 0), xn[:, [0, 1]]),
            ops.grid_sample(ops.index(plane, 1), xn[:, [0, 2]]),
            ops.grid_sample(ops.index(plane, 2), xn[:, [1, 2]]),
        ]
        return _mlp(tensors, "F", ops.concat(feats, axis=1), self.config.softplus_beta)

    def forward(self, mesh: MorphableMesh, anchors: Anchors, points: np.ndarray, motion: FrameMotion,
                log_scales, frame_index: int | None = None, tensors: dict | None = None,
                positions=None, rotations=None, geom: FrameGeometry | None = None,
                displacement_only: bool = False) -> DeformResult:
        """Deform N canonical Gaussians for one frame.

        ``points`` (N, 3) are the canonical means used to condition the networks.
        ``positions`` (tensor or array, defaults to ``points``) receive the displacement;
        ``rotations`` (N, 3, 3) and ``log_scales`` (N, 3) are the canonical attributes.
        ``frame_index=None`` drops the per-frame offset (novel frames).
        """
        c = self.config
        tensors = self.tensors(requires_grad=False) if tensors is None else tensors
        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        mode = c.prior_mode
        if geom is None:
            geom = frame_geometry(mesh, anchors, motion, use_mesh_rotation=mode != "none")
        xn = self.normalize(points)
        cond = self._conditioning(xn, geom, motion.gamma)
        beta = c.softplus_beta
        weights = eta = t = None
        if mode == "learnable":
            raw = self.raw_weights(tensors, xn)
            prior_w = anchors.near[:, None] * anchors.idw
            weights = raw + prior_w
            prior = ops.sum(ops.reshape(weights, (n, -1, 1)) * geom.delta_knn, axis=1)
            eta = _mlp(tensors, "G", cond, beta)
            disp = prior + eta
            if frame_index is not None:
                code = ops.index(tensors["T.codes"], self.code_row(frame_index))
                t = ops.reshape(_mlp(tensors, "T", ops.reshape(code, (1, -1)), beta), (3,))
                disp = disp + t
        else:
            pos_gamma = np.concatenate(
                [positional_encode(xn, c.pe_freqs_pos), np.broadcast_to(motion.gamma, (n, len(motion.gamma)))], axis=1
            )
            learned = _mlp(tensors, "M", pos_gamma, beta)
            if mode == "fixed":
                sigma = self.threshold / 3.0
                decay = np.exp(-anchors.mesh_distance**2 / (2 * sigma**2))
                prior = geom.dwavg * decay[:, None]
            else:
                prior = np.zeros((n, 3))
            disp = learned + prior
        base = points if positions is None else positions
        x_def = base + disp
        if displacement_only:
            return DeformResult(x_def, None, None, disp, prior, eta, t, None, None, weights, geom.degenerate)
        r_star = ops.axis_angle_to_matrix(_mlp(tensors, "R", cond, beta))
        r_prime = ops.matmul(geom.r_mesh, r_star)
        rot_can = np.broadcast_to(np.eye(3), (n, 3, 3)) if rotations is None else rotations
        rot_def = ops.matmul(r_prime, rot_can)
        s_raw = _mlp(tensors, "S", cond, beta)
        log_def = s_raw + log_scales
        return DeformResult(x_def, rot_def, log_def, disp, prior, eta, t, r_prime, s_raw, weights, geom.degenerate)

    # single-point API ------------------------------------------------------------

    def predict_weights(self, x_can, knn_dist, near: bool | None = None) -> np.ndarray:
        """Vertex weights ``F_raw(x) + m u`` for one point (learnable mode)."""
        if self.config.prior_mode != "learnable":
            raise ValueError("vertex weights exist only in learnable mode")
        knn_dist = np.asarray(knn_dist, dtype=np.float64).reshape(1, -1)
        m = (knn_dist[0, 0] < self.threshold) if near is None else near
        xn = self.normalize(np.reshape(x_can, (1, 3)))
        raw = self.raw_weights(self.tensors(requires_grad=False), xn).data[0]
        return raw + float(m) * idw_weights(knn_dist)[0]

    def deform_position(self, x_can, knn_dist, delta_vs, frame_index=None, gamma=None, weights=None,
                        training: bool = False):
        """Deformed mean for one point; returns ``(x_def, parts)``.

        ``delta_vs`` (K, 3) are the neighbour displacements and ``knn_dist`` their
        canonical distances. ``weights`` overrides the predicted vertex weights.
        During training an unknown ``frame_index`` is an error; otherwise the
        per-frame offset is skipped.
        """
        x_can = np.asarray(x_can, dtype=np.float64).reshape(3)
        delta_vs = np.asarray(delta_vs, dtype=np.float64).reshape(-1, 3)
        knn_dist = np.asarray(knn_dist, dtype=np.float64).reshape(-1)
        gamma = np.zeros(self.n_expressions + 4) if gamma is None else np.asarray(gamma, dtype=np.float64)
        if frame_index is not None and not training and int(frame_index) not in self.frame_ids:
            frame_index = None
        mode = self.config.prior_mode
        if weights is not None or mode == "learnable":
            if weights is None:
                weights = self.predict_weights(x_can, knn_dist)
            prior = np.asarray(weights, dtype=np.float64) @ delta_vs
        elif mode == "fixed":
            sigma = self.threshold / 3.0
            prior = idw_weights(knn_dist) @ delta_vs * np.exp(-knn_dist[0] ** 2 / (2 * sigma**2))
        else:
            prior = np.zeros(3)
        xn = self.normalize(x_can.reshape(1, 3))
        geom = FrameGeometry(delta_vs[None], (idw_weights(knn_dist) @ delta_vs)[None], np.eye(3)[None],
                             np.zeros(1, dtype=bool))
        tensors = self.tensors(requires_grad=False)
        beta = self.config.softplus_beta
        eta = np.zeros(3)
        t = np.zeros(3)
        if mode == "learnable":
            eta = _mlp(tensors, "G", self._conditioning(xn, geom, gamma), beta).data[0]
            if frame_index is not None:
                code = tensors["T.codes"].data[self.code_row(frame_index)].reshape(1, -1)
                t = _mlp(tensors, "T", code, beta).data[0]
        else:
            pos_gamma = np.concatenate([positional_encode(xn, self.config.pe_freqs_pos), gamma[None]], axis=1)
            eta = _mlp(tensors, "M", pos_gamma, beta).data[0]
        return x_can + prior + eta + t, {"prior_term": prior, "eta": eta, "t": t}

    def deform_rotation(self, x_can, rotation_can, knn_src, knn_dst, near: bool = True) -> np.ndarray:
        """Deformed rotation quaternion for one point from its neighbours' motion."""
        x_can = np.asarray(x_can, dtype=np.float64).reshape(1, 3)
        src = np.asarray(knn_src, dtype=np.float64)
        dst = np.asarray(knn_dst, dtype=np.float64)
        delta = dst - src
        dist = np.linalg.norm(src - x_can, axis=1)
        res = kabsch(src, dst)
        r_mesh = res.rotation if (near and self.config.prior_mode != "none") else np.eye(3)
        geom = FrameGeometry(delta[None], np.einsum("k,kc->c", idw_weights(dist), delta)[None],
                             r_mesh[None], np.array([res.degenerate]))
        gamma = np.zeros(self.n_expressions + 4)
        xn = self.normalize(x_can)
        cond = self._conditioning(xn, geom, gamma)
        tensors = self.tensors(requires_grad=False)
        r_star = ops.axis_angle_to_matrix(_mlp(tensors, "R", cond, self.config.softplus_beta)).data[0]
        rot = r_mesh @ r_star @ quat_to_matrix(np.asarray(rotation_can, dtype=np.float64))
        return matrix_to_quat(rot)

    def deform_scale(self, x_can, log_scale_can, delta_vs, knn_dist) -> np.ndarray:
        x_can = np.asarray(x_can, dtype=np.float64).reshape(1, 3)
        delta_vs = np.asarray(delta_vs, dtype=np.float64)
        avg = np.einsum("k,kc->c", idw_weights(np.asarray(knn_dist, dtype=np.float64)), delta_vs)[None]
        geom = FrameGeometry(delta_vs[None], avg, np.eye(3)[None], np.zeros(1, dtype=bool))
        cond = self._conditioning(self.normalize(x_can), geom, np.zeros(self.n_expressions + 4))
        s_raw = _mlp(self.tensors(requires_grad=False), "S", cond, self.config.softplus_beta).data[0]
        return np.asarray(log_scale_can, dtype=np.float64) + s_raw

    # bookkeeping ----------------------------------------------------------------

    def meta(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "n_expressions": self.n_expressions,
            "box_center": self.box_center.tolist(),
            "box_half": self.box_half.tolist(),
            "threshold": self.threshold,
            "frame_ids": list(self.frame_ids),
        }

    @classmethod
    def from_meta(cls, meta: dict, params: dict[str, np.ndarray]) -> "DeformationField":
        return cls(
            DeformationConfig(**meta["config"]),
            int(meta["n_expressions"]),
            np.array(meta["box_center"]),
            np.array(meta["box_half"]),
            float(meta["threshold"]),
            [int(i) for i in meta["frame_ids"]],
            {k: np.asarray(v) for k, v in params.items()},
        )

