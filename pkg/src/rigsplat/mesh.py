"""Synthetic morphable head mesh plus the geometric queries the deformation prior needs.

The head is a subdivided icosphere with a linear expression basis (smooth radial
bumps), a rigid head rotation about a neck pivot and a jaw region that rotates
about its own pivot, blended per vertex.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .scene import axis_angle_to_matrix

IDW_EPS = 1e-8


class MeshShapeError(ValueError):
    pass


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and faces of an icosphere; ``10 * 4**s + 2`` vertices."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.asarray(verts) * radius, np.asarray(faces, dtype=np.int64)


@dataclass
class MorphableMesh:
    vertices_can: np.ndarray
    faces: np.ndarray
    blendshapes: np.ndarray
    head_pivot: np.ndarray
    jaw_pivot: np.ndarray
    jaw_weights: np.ndarray

    def __post_init__(self):
        self.vertices_can = np.asarray(self.vertices_can, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.blendshapes = np.asarray(self.blendshapes, dtype=np.float64)
        self.head_pivot = np.asarray(self.head_pivot, dtype=np.float64)
        self.jaw_pivot = np.asarray(self.jaw_pivot, dtype=np.float64)
        self.jaw_weights = np.asarray(self.jaw_weights, dtype=np.float64)
        v = len(self.vertices_can)
        if v < 4:
            raise MeshShapeError("a morphable mesh needs at least 4 vertices")
        if self.faces.size and (self.faces.max() >= v or self.faces.min() < 0):
            raise MeshShapeError("face index out of range")
        if self.blendshapes.ndim != 3 or self.blendshapes.shape[1:] != (v, 3):
            raise MeshShapeError(f"blendshapes must be (E, {v}, 3), got {self.blendshapes.shape}")
        if self.jaw_weights.shape != (v,):
            raise MeshShapeError("jaw_weights must have one entry per vertex")
        self._tree: KDTree | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices_can)

    @property
    def n_expressions(self) -> int:
        return len(self.blendshapes)

    @property
    def bounding_radius(self) -> float:
        center = self.vertices_can.mean(axis=0)
        return float(np.linalg.norm(self.vertices_can - center, axis=1).max())

    @property
    def tree(self) -> "KDTree":
        if self._tree is None:
            self._tree = KDTree(self.vertices_can)
        return self._tree

    def evaluate(self, gamma_exp, gamma_pose) -> np.ndarray:
        return evaluate_mesh(self, gamma_exp, gamma_pose)

    @classmethod
    def synthetic(cls, subdivisions: int = 3, n_expressions: int = 8, seed: int = 0) -> "MorphableMesh":
        """Procedural stand-in for a parametric face model.

        Expression ``e`` displaces vertices along their normals with a Gaussian bump
        centred on the front hemisphere; the jaw occupies the lower front of the head.
        """
        rng = np.random.default_rng(seed)
        verts, faces = icosphere(subdivisions)
        normals = verts / np.linalg.norm(verts, axis=1, keepdims=True)
        shapes = np.empty((n_expressions, len(verts), 3))
        for e in range(n_expressions):
            yaw = rng.uniform(-1.1, 1.1)
            pitch = rng.uniform(-0.7, 0.6)
            center = np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
            width = rng.uniform(0.3, 0.5)
            amp = rng.uniform(0.08, 0.16) * rng.choice([-1.0, 1.0])
            bump = np.exp(-np.sum((normals - center) ** 2, axis=1) / (2 * width**2))
            shapes[e] = amp * bump[:, None] * normals
        y, z = verts[:, 1], verts[:, 2]
        jaw = np.clip((-y - 0.2) / 0.35, 0.0, 1.0) * np.clip((z + 0.1) / 0.5, 0.0, 1.0)
        return cls(
            vertices_can=verts,
            faces=faces,
            blendshapes=shapes,
            head_pivot=np.array([0.0, -1.2, 0.0]),
            jaw_pivot=np.array([0.0, -0.1, -0.3]),
            jaw_weights=jaw,
        )


def _check_params(mesh: MorphableMesh, gamma_exp, gamma_pose) -> tuple[np.ndarray, np.ndarray]:
    gamma_exp = np.asarray(gamma_exp, dtype=np.float64)
    gamma_pose = np.asarray(gamma_pose, dtype=np.float64)
    if gamma_exp.shape != (mesh.n_expressions,):
        raise MeshShapeError(f"expected {mesh.n_expressions} expression coefficients, got {gamma_exp.shape}")
    if gamma_pose.shape != (4,):
        raise MeshShapeError(f"expected 4 pose parameters, got {gamma_pose.shape}")
    return gamma_exp, gamma_pose


def evaluate_mesh(mesh: MorphableMesh, gamma_exp, gamma_pose) -> np.ndarray:
    """Posed vertices: head rotation after jaw articulation after expression blend."""
    gamma_exp, gamma_pose = _check_params(mesh, gamma_exp, gamma_pose)
    v = mesh.vertices_can + np.tensordot(gamma_exp, mesh.blendshapes, axes=1)
    jaw_angle = gamma_pose[3]
    if jaw_angle != 0.0:
        rj = axis_angle_to_matrix(np.array([jaw_angle, 0.0, 0.0]))
        rotated = (v - mesh.jaw_pivot) @ rj.T + mesh.jaw_pivot
        v = v + mesh.jaw_weights[:, None] * (rotated - v)
    if np.any(gamma_pose[:3] != 0.0):
        rh = axis_angle_to_matrix(gamma_pose[:3])
        v = (v - mesh.head_pivot) @ rh.T + mesh.head_pivot
    return v


def vertex_deformations(mesh: MorphableMesh, gamma_exp, gamma_pose) -> np.ndarray:
    return evaluate_mesh(mesh, gamma_exp, gamma_pose) - mesh.vertices_can


class KDTree:
    """Exact k-nearest-neighbour search over a fixed 3D point set.

    Neighbours are ordered by squared distance, ties by lower point index.
    """

    LEAF_SIZE = 16

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        # node: (axis, split, left, right) for inner nodes, (-1, indices) for leaves
        self._nodes: list[tuple] = []
        self._root = self._build(np.arange(len(self.points)))

    def _build(self, idx: np.ndarray) -> int:
        if len(idx) <= self.LEAF_SIZE:
            self._nodes.append((-1, np.sort(idx)))
            return len(self._nodes) - 1
        pts = self.points[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        order = np.argsort(pts[:, axis], kind="stable")
        mid = len(idx) // 2
        split = float(pts[order[mid], axis])
        node = len(self._nodes)
        self._nodes.append(None)
        left = self._build(idx[order[:mid]])
        right = self._build(idx[order[mid:]])
        # points on the split plane may sit on either side; the pruning test below is
        # conservative about that (it compares against the plane, not the cell)
        self._nodes[node] = (axis, split, left, right)
        return node

    def query(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        if not 1 <= k <= len(self.points):
            raise ValueError(f"k must be in [1, {len(self.points)}], got {k}")
        q = np.asarray(q, dtype=np.float64)
        heap: list[tuple[float, int]] = []  # max-heap on (d2, idx) via negation

        def worst() -> tuple[float, int]:
            return -heap[0][0], -heap[0][1]

        stack = [self._root]
        while stack:
            node = self._nodes[stack.pop()]
            if node[0] == -1:
                idx = node[1]
                d2 = np.sum((self.points[idx] - q) ** 2, axis=1)
                for dist2, i in zip(d2.tolist(), idx.tolist()):
                    if len(heap) < k:
                        heapq.heappush(heap, (-dist2, -i))
                    elif (dist2, i) < worst():
                        heapq.heapreplace(heap, (-dist2, -i))
                continue
            axis, split, left, right = node
            diff = q[axis] - split
            near, far = (left, right) if diff < 0 else (right, left)
            if len(heap) < k or diff * diff <= worst()[0]:
                stack.append(far)
            stack.append(near)
        best = sorted((-d, -i) for d, i in heap)
        idx = np.array([i for _, i in best], dtype=np.int64)
        return idx, np.sqrt(np.array([d for d, _ in best]))

    def query_batch(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        idx = np.empty((len(queries), k), dtype=np.int64)
        dist = np.empty((len(queries), k))
        for n, q in enumerate(queries):
            idx[n], dist[n] = self.query(q, k)
        return idx, dist


def knn_vertices(query, mesh: MorphableMesh, k: int) -> tuple[np.ndarray, np.ndarray]:
    """K nearest canonical mesh vertices of ``query``, nearest first."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim == 1:
        return mesh.tree.query(query, k)
    return mesh.tree.query_batch(query, k)


def knn_brute_force(query, points, k: int) -> tuple[np.ndarray, np.ndarray]:
    d2 = np.sum((np.asarray(points, dtype=np.float64) - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    order = np.lexsort((np.arange(len(d2)), d2))[:k]
    return order, np.sqrt(d2[order])


def idw_weights(distances: np.ndarray) -> np.ndarray:
    """Normalised inverse-distance weights over the last axis.

    A neighbour at exactly zero distance takes all the weight.
    """
    distances = np.asarray(distances, dtype=np.float64)
    w = 1.0 / (distances + IDW_EPS)
    w = w / w.sum(axis=-1, keepdims=True)
    hit = distances == 0.0
    any_hit = hit.any(axis=-1, keepdims=True)
    first_hit = hit & (np.cumsum(hit, axis=-1) == 1)
    return np.where(any_hit, first_hit.astype(np.float64), w)


def dwavg(deltas: np.ndarray, distances: np.ndarray) -> np.ndarray:
    """Inverse-distance-weighted average of per-neighbour deltas (..., K, 3) -> (..., 3)."""
    w = idw_weights(distances)
    return np.einsum("...k,...kc->...c", w, np.asarray(deltas, dtype=np.float64))


@dataclass
class KabschResult:
    rotation: np.ndarray
    degenerate: np.ndarray


def kabsch(source: np.ndarray, target: np.ndarray) -> KabschResult:
    """Proper rotation ``R`` minimising ``sum |R (s_i - s_mean) - (t_i - t_mean)|^2``.

    Accepts single point sets (K, 3) or batches (N, K, 3). Point sets whose
    cross-covariance has rank < 2 yield the identity and are flagged.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    single = src.ndim == 2
    if single:
        src, dst = src[None], dst[None]
    if src.shape != dst.shape or src.shape[-1] != 3:
        raise MeshShapeError("kabsch needs matching (K, 3) point sets")
    if src.shape[1] < 3:
        raise MeshShapeError("kabsch needs at least 3 points")
    a = src - src.mean(axis=1, keepdims=True)
    b = dst - dst.mean(axis=1, keepdims=True)
    h = np.swapaxes(a, 1, 2) @ b
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    diag = np.ones((len(h), 3))
    diag[:, 2] = d
    rot = (v * diag[:, None, :]) @ ut
    scale = np.maximum(s[:, 0], 1e-300)
    degenerate = s[:, 1] <= 1e-10 * scale
    still = np.all(src == dst, axis=(1, 2))
    rot[degenerate | still] = np.eye(3)
    if single:
        return KabschResult(rot[0], degenerate[0])
    return KabschResult(rot, degenerate)
