"""Procedural ground truth: a morphable head in front of a static backdrop.

The reference world holds three kinds of splats:

* one per mesh vertex, lying flat on the surface; it follows its vertex exactly
  and turns with the Kabsch rotation of the vertex's K-neighbourhood;
* hair splats a short distance off the upper head, rigidly attached to their
  nearest vertex (offset rotated by that vertex's neighbourhood rotation);
* static splats on a backdrop plane and a floor.

Ground-truth images come from the untiled reference renderer. The initial point
cloud handed to training holds the background and hair positions (slightly
jittered) with their colours; the mesh vertices come from the mesh file.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import FORMAT_VERSION, save_mesh
from .images import write_float_image, write_mask, write_png
from .mesh import MorphableMesh, evaluate_mesh, kabsch
from .raster import project_batch, render_reference
from .scene import Camera, GaussianCloud, SourceTag, matrix_to_quat, quat_to_matrix
from .tensorio import write_tensor_dir

log = logging.getLogger(__name__)

HEAD_TARGET = np.array([0.0, 0.0, 0.0])
WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass
class SynthConfig:
    seed: int = 0
    subdivision: int = 3
    n_expressions: int = 8
    n_background: int = 1000   # initial points: backdrop, floor and hair together
    hair_fraction: float = 0.15
    width: int = 64
    height: int = 64
    n_train: int = 200
    n_setting1: int = 20
    n_setting2: int = 20
    orbit_radius: float = 5.5
    orbit_yaw_deg: tuple = (-30.0, -15.0, 15.0, 30.0)
    orbit_pitch_deg: tuple = (-8.0, 10.0)
    focal_scale: float = 1.375  # focal length in units of image width
    yaw_max_deg: float = 40.0
    pitch_max_deg: float = 40.0
    roll_max_deg: float = 10.0
    jaw_max_deg: float = 25.0
    exp_step: float = 0.3
    angle_step_deg: float = 8.0
    point_jitter: float = 0.01
    k: int = 10
    mask_dilation: int = 2

    def __post_init__(self):
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.width < 11 or self.height < 11:
            raise ValueError("images must be at least 11x11")
        self.orbit_yaw_deg = tuple(self.orbit_yaw_deg)
        self.orbit_pitch_deg = tuple(self.orbit_pitch_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["orbit_yaw_deg"] = list(self.orbit_yaw_deg)
        d["orbit_pitch_deg"] = list(self.orbit_pitch_deg)
        return d

    @property
    def n_hair(self) -> int:
        return int(round(self.hair_fraction * self.n_background))


def f32(a) -> np.ndarray:
    """Round to float32 and back, so file contents and in-memory values agree."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _frame_from_normal(normals: np.ndarray) -> np.ndarray:
    """Rotation matrices whose third column is the given unit normal."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, 1:2]) < 0.9, np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def _logit(p):
    return np.log(p / (1.0 - p))


def head_colors(normals: np.ndarray) -> np.ndarray:
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    skin = np.array([0.86, 0.63, 0.52])
    col = skin * (0.85 + 0.15 * (0.5 + 0.5 * np.sin(3.0 * x + 2.0 * y)))[:, None]
    for sx in (-0.35, 0.35):
        eye = np.exp(-((x - sx) ** 2 + (y - 0.22) ** 2) / (2 * 0.09**2)) * (z > 0)
        col = col * (1 - 0.85 * eye[:, None]) + 0.85 * eye[:, None] * np.array([0.12, 0.16, 0.35])
    mouth = np.exp(-(x**2 / (2 * 0.22**2) + (y + 0.45) ** 2 / (2 * 0.06**2))) * (z > 0)
    col = col * (1 - 0.9 * mouth[:, None]) + 0.9 * mouth[:, None] * np.array([0.7, 0.15, 0.18])
    brows = np.exp(-((np.abs(x) - 0.35) ** 2 / (2 * 0.12**2) + (y - 0.42) ** 2 / (2 * 0.04**2))) * (z > 0)
    col = col * (1 - 0.7 * brows[:, None]) + 0.7 * brows[:, None] * np.array([0.25, 0.15, 0.1])
    cap = np.clip((y - 0.35) / 0.25, 0.0, 1.0) + np.clip((-z - 0.2) / 0.3, 0.0, 1.0) * (y > -0.4)
    cap = np.clip(cap, 0.0, 1.0)
    return col * (1 - cap[:, None]) + cap[:, None] * np.array([0.3, 0.19, 0.1])


@dataclass
class ReferenceWorld:
    """Canonical ground-truth splats and the rules that move them."""

    mesh: MorphableMesh
    cloud: GaussianCloud          # rows: mesh splats (V), hair, background
    vertex_knn: np.ndarray        # (V, K) neighbourhood of each vertex, self first
    hair_vertex: np.ndarray       # (H,) vertex each hair splat is attached to
    n_hair: int

    @property
    def n_mesh(self) -> int:
        return self.mesh.n_vertices

    def state(self, gamma_exp, gamma_pose):
        """Deformed ``(positions, rotation matrices, log_scales, colors, opacities)``."""
        v_def = evaluate_mesh(self.mesh, gamma_exp, gamma_pose)
        v_can = self.mesh.vertices_can
        nbr = self.vertex_knn
        rot_v = kabsch(v_can[nbr], v_def[nbr]).rotation
        cloud = self.cloud
        pos = cloud.positions.astype(np.float64).copy()
        rot = quat_to_matrix(cloud.rotations.astype(np.float64))
        v = self.n_mesh
        pos[:v] = v_def
        rot[:v] = rot_v @ rot[:v]
        hs = slice(v, v + self.n_hair)
        j = self.hair_vertex
        pos[hs] = v_def[j] + np.einsum("nij,nj->ni", rot_v[j], pos[hs] - v_can[j])
        rot[hs] = rot_v[j] @ rot[hs]
        return pos, rot, cloud.log_scales.astype(np.float64), cloud.colors.astype(np.float64), cloud.opacities

    def covariances(self, rot, log_scales):
        m = rot * np.exp(log_scales)[:, None, :]
        return m @ np.swapaxes(m, 1, 2)

    def render(self, gamma_exp, gamma_pose, camera: Camera, reference: bool = True):
        from .raster import render

        pos, rot, ls, col, op = self.state(gamma_exp, gamma_pose)
        batch = project_batch(pos, self.covariances(rot, ls), camera, col, op)
        out = render_reference(batch, camera) if reference else render(batch, camera)
        return out.image

    def to_tensors(self) -> dict[str, np.ndarray]:
        t = self.cloud.to_arrays()
        t["vertex_knn"] = self.vertex_knn.astype(np.int32)
        t["hair_vertex"] = self.hair_vertex.astype(np.int32)
        return t

    @classmethod
    def from_tensors(cls, mesh: MorphableMesh, tensors: dict, n_hair: int) -> "ReferenceWorld":
        return cls(mesh, GaussianCloud.from_arrays(tensors), tensors["vertex_knn"].astype(np.int64),
                   tensors["hair_vertex"].astype(np.int64), int(n_hair))


def build_world(cfg: SynthConfig, rng) -> tuple[ReferenceWorld, np.ndarray, np.ndarray]:
    """Reference world plus the initial point cloud (positions, colors) for training."""
    mesh = MorphableMesh.synthetic(cfg.subdivision, cfg.n_expressions, seed=int(rng.integers(2**31)))
    mesh = MorphableMesh(f32(mesh.vertices_can), mesh.faces, f32(mesh.blendshapes), f32(mesh.head_pivot),
                         f32(mesh.jaw_pivot), f32(mesh.jaw_weights))
    v = mesh.vertices_can
    normals = v / np.linalg.norm(v, axis=1, keepdims=True)
    vertex_knn, _ = mesh.tree.query_batch(v, cfg.k)

    # surface splats: flat discs in the tangent plane
    edge = np.mean(np.linalg.norm(v[mesh.faces[:, 0]] - v[mesh.faces[:, 1]], axis=1))
    mesh_rot = _frame_from_normal(normals)
    mesh_ls = np.tile(np.log([0.55 * edge, 0.55 * edge, 0.12 * edge]), (len(v), 1))
    mesh_col = head_colors(normals)

    # hair: above the upper head, attached to the nearest vertex
    n_hair = cfg.n_hair
    upper = np.flatnonzero((normals[:, 1] > 0.25) | ((normals[:, 2] < -0.3) & (normals[:, 1] > -0.3)))
    anchor = np.sort(rng.choice(upper, size=n_hair, replace=n_hair > len(upper)))
    offset = rng.uniform(0.04, 0.11, n_hair)
    tangent_jitter = rng.normal(0.0, 0.02, (n_hair, 3))
    hair_pos = v[anchor] + normals[anchor] * offset[:, None] + tangent_jitter
    hair_pos = f32(hair_pos)
    hair_vertex, _ = mesh.tree.query_batch(hair_pos, 1)
    hair_vertex = hair_vertex[:, 0]
    hair_rot = _frame_from_normal(normals[hair_vertex] + rng.normal(0.0, 0.3, (n_hair, 3)))
    hair_ls = np.column_stack([np.log(rng.uniform(0.03, 0.05, n_hair)), np.log(rng.uniform(0.03, 0.05, n_hair)),
                               np.log(rng.uniform(0.08, 0.14, n_hair))])
    shade = rng.uniform(0.6, 1.1, n_hair)[:, None]
    hair_col = np.clip(np.array([0.22, 0.13, 0.06]) * shade + rng.normal(0, 0.02, (n_hair, 3)), 0, 1)

    # backdrop and floor
    n_bg = cfg.n_background - n_hair
    n_back = int(round(0.7 * n_bg))
    n_floor = n_bg - n_back
    bx = rng.uniform(-6.0, 6.0, n_back)
    by = rng.uniform(-4.0, 4.0, n_back)
    back_pos = np.column_stack([bx, by, np.full(n_back, -3.5) + rng.normal(0, 0.02, n_back)])
    back_col = np.column_stack([
        0.45 + 0.25 * np.sin(0.9 * bx) * np.cos(0.7 * by),
        0.55 + 0.2 * np.cos(0.6 * bx + 0.4),
        0.6 + 0.25 * np.sin(0.5 * by + 1.0),
    ])
    back_rot = _frame_from_normal(np.tile([0.0, 0.0, 1.0], (n_back, 1)))
    spacing = np.sqrt(12.0 * 8.0 / max(n_back, 1))
    back_ls = np.tile(np.log([0.6 * spacing, 0.6 * spacing, 0.05]), (n_back, 1))
    fx_ = rng.uniform(-6.0, 6.0, n_floor)
    fz = rng.uniform(-3.5, 3.0, n_floor)
    floor_pos = np.column_stack([fx_, np.full(n_floor, -2.5), fz])
    check = 0.5 + 0.5 * np.sin(1.5 * fx_) * np.sin(1.5 * fz)
    floor_col = np.column_stack([0.35 + 0.3 * check, 0.3 + 0.25 * check, 0.25 + 0.1 * check])
    floor_rot = _frame_from_normal(np.tile([0.0, 1.0, 0.0], (n_floor, 1)))
    spacing_f = np.sqrt(12.0 * 6.5 / max(n_floor, 1))
    floor_ls = np.tile(np.log([0.6 * spacing_f, 0.6 * spacing_f, 0.05]), (n_floor, 1))

    positions = np.concatenate([v, hair_pos, f32(back_pos), f32(floor_pos)])
    rots = np.concatenate([mesh_rot, hair_rot, back_rot, floor_rot])
    quats = matrix_to_quat(rots)
    log_scales = np.concatenate([mesh_ls, hair_ls, back_ls, floor_ls])
    colors = np.clip(np.concatenate([mesh_col, hair_col, back_col, floor_col]), 0.0, 1.0)
    opac = np.concatenate([np.full(len(v), 0.95), np.full(n_hair, 0.85), np.full(n_bg, 0.9)])
    tags = np.concatenate([np.full(len(v), SourceTag.MESH), np.full(cfg.n_background, SourceTag.BACKGROUND)])
    cloud = GaussianCloud(positions, quats, log_scales, _logit(opac), colors, tags)
    cloud = GaussianCloud.from_arrays(cloud.to_arrays())  # f32 storage
    world = ReferenceWorld(mesh, cloud, vertex_knn, hair_vertex, n_hair)

    init_pos = positions[len(v):] + rng.normal(0.0, cfg.point_jitter, (cfg.n_background, 3))
    init_col = colors[len(v):]
    return world, f32(init_pos), f32(init_col)


# -- cameras and parameter sequences ---------------------------------------------


def orbit_camera(cfg: SynthConfig, yaw_deg: float, pitch_deg: float) -> Camera:
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    eye = HEAD_TARGET + cfg.orbit_radius * np.array(
        [np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)]
    )
    f = cfg.focal_scale * cfg.width
    return Camera.look_at(eye, HEAD_TARGET, WORLD_UP, fx=f, fy=f, cx=(cfg.width - 1) / 2,
                          cy=(cfg.height - 1) / 2, width=cfg.width, height=cfg.height)


def _pose_limits(cfg: SynthConfig) -> np.ndarray:
    return np.radians([cfg.pitch_max_deg, cfg.yaw_max_deg, cfg.roll_max_deg])


def random_walk(cfg: SynthConfig, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Smooth parameter sequence starting from the canonical configuration."""
    exp = np.zeros((n, cfg.n_expressions))
    pose = np.zeros((n, 4))
    lim = _pose_limits(cfg)
    step = np.radians(cfg.angle_step_deg)
    jaw_max = np.radians(cfg.jaw_max_deg)
    for i in range(1, n):
        exp[i] = np.clip(exp[i - 1] + rng.normal(0.0, cfg.exp_step, cfg.n_expressions), -1.0, 1.0)
        pose[i, :3] = np.clip(pose[i - 1, :3] + rng.normal(0.0, step, 3) * np.array([1.0, 1.0, 0.4]), -lim, lim)
        pose[i, 3] = np.clip(pose[i - 1, 3] + rng.normal(0.0, step * 0.6), 0.0, jaw_max)
    return exp, pose


def random_params(cfg: SynthConfig, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    lim = _pose_limits(cfg)
    exp = rng.uniform(-0.9, 0.9, (n, cfg.n_expressions))
    pose = np.column_stack([rng.uniform(-0.8, 0.8, (n, 3)) * lim, rng.uniform(0.0, np.radians(cfg.jaw_max_deg), n)])
    return exp, pose


# -- masks -------------------------------------------------------------------------


def silhouette_mask(mesh: MorphableMesh, vertices: np.ndarray, camera: Camera, dilation: int = 2) -> np.ndarray:
    """Pixels whose centre falls inside any projected face, dilated by ``dilation`` pixels."""
    p = vertices @ camera.rotation.T + camera.translation
    uv = np.column_stack([camera.fx * p[:, 0] / p[:, 2] + camera.cx, camera.fy * p[:, 1] / p[:, 2] + camera.cy])
    h, w = camera.height, camera.width
    mask = np.zeros((h, w), dtype=bool)
    for a, b, c in mesh.faces:
        tri = uv[[a, b, c]]
        x0, y0 = np.floor(tri.min(axis=0)).astype(int)
        x1, y1 = np.ceil(tri.max(axis=0)).astype(int)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        (ax, ay), (bx, by), (cx, cy) = tri
        d = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if abs(d) < 1e-12:
            continue
        l1 = ((by - cy) * (xs - cx) + (cx - bx) * (ys - cy)) / d
        l2 = ((cy - ay) * (xs - cx) + (ax - cx) * (ys - cy)) / d
        inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
        mask[y0:y1 + 1, x0:x1 + 1] |= inside
    if dilation > 0:
        r = dilation
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        mask = ndimage.binary_dilation(mask, structure=(xx * xx + yy * yy) <= r * r)
    return mask


# -- generation --------------------------------------------------------------------


def plan_frames(cfg: SynthConfig, rng):
    """Cameras and per-frame parameters for all splits."""
    cameras = [orbit_camera(cfg, 0.0, 0.0)]
    for pitch in cfg.orbit_pitch_deg:
        for yaw in cfg.orbit_yaw_deg:
            cameras.append(orbit_camera(cfg, yaw, pitch))
    n_train_cams = len(cameras)
    exp, pose = random_walk(cfg, rng, cfg.n_train)
    frames = []
    half = (cfg.n_train + 1) // 2
    for i in range(cfg.n_train):
        cam = 0 if i < half else (i - half) % n_train_cams
        frames.append({"index": i, "split": "train", "exp": exp[i], "pose": pose[i], "camera_index": cam})
    exp1, pose1 = random_params(cfg, rng, cfg.n_setting1)
    for j in range(cfg.n_setting1):
        frames.append({"index": cfg.n_train + j, "split": "setting1", "exp": exp1[j], "pose": pose1[j],
                       "camera_index": 0})
    anchor = cfg.n_train // 2 + cfg.n_train // 4 if cfg.n_train > 1 else 0
    exp2, _ = random_params(cfg, rng, cfg.n_setting2)
    yaw_lo, yaw_hi = min(cfg.orbit_yaw_deg + (0.0,)), max(cfg.orbit_yaw_deg + (0.0,))
    pitch_lo, pitch_hi = min(cfg.orbit_pitch_deg + (0.0,)), max(cfg.orbit_pitch_deg + (0.0,))
    for j in range(cfg.n_setting2):
        cameras.append(orbit_camera(cfg, rng.uniform(yaw_lo, yaw_hi), rng.uniform(pitch_lo, pitch_hi)))
        frames.append({"index": cfg.n_train + cfg.n_setting1 + j, "split": "setting2", "exp": exp2[j],
                       "pose": pose[anchor].copy(), "camera_index": len(cameras) - 1})
    for fr in frames:
        fr["exp"] = f32(fr["exp"])
        fr["pose"] = f32(fr["pose"])
    return cameras, frames, anchor


def generate(cfg: SynthConfig, out_dir) -> Path:
    """Write a complete dataset directory; deterministic under ``cfg.seed``."""
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    world, init_pos, init_col = build_world(cfg, rng)
    cameras, frames, anchor = plan_frames(cfg, rng)
    try:
        if out.exists():
            shutil.rmtree(out)
        for sub in ("frames", "masks"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    save_mesh(out / "mesh", world.mesh)
    write_tensor_dir(out / "points", {"positions": init_pos.astype(np.float32), "colors": init_col.astype(np.float32)},
                     {"count": len(init_pos)}, atomic=False)
    write_tensor_dir(out / "world", world.to_tensors(), {"n_hair": world.n_hair, "k": cfg.k}, atomic=False)
    entries = []
    for fr in frames:
        i = fr["index"]
        cam = cameras[fr["camera_index"]]
        image = world.render(fr["exp"], fr["pose"], cam)
        stem = f"{i:05d}"
        write_png(out / "frames" / f"{stem}.png", image, srgb=False)
        write_float_image(out / "frames" / f"{stem}.f32", image)
        params = {"exp": [float(x) for x in fr["exp"]], "pose": [float(x) for x in fr["pose"]],
                  "camera_index": int(fr["camera_index"])}
        (out / "frames" / f"{stem}.params.json").write_text(json.dumps(params) + "\n")
        verts = evaluate_mesh(world.mesh, fr["exp"], fr["pose"])
        write_mask(out / "masks" / f"{stem}.png", silhouette_mask(world.mesh, verts, cam, cfg.mask_dilation))
        entries.append({
            "index": i,
            "split": fr["split"],
            "image": f"frames/{stem}.png",
            "float_image": f"frames/{stem}.f32",
            "params": f"frames/{stem}.params.json",
            "mask": f"masks/{stem}.png",
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator": {"name": "rigsplat.synth", "config": cfg.to_dict()},
        "n_expressions": cfg.n_expressions,
        "image_size": [cfg.width, cfg.height],
        "mesh": "mesh",
        "init_points": "points",
        "world": "world",
        "cameras": [c.to_dict() for c in cameras],
        "frames": entries,
        "splits": {s: [e["index"] for e in entries if e["split"] == s] for s in ("train", "setting1", "setting2")},
        "setting1_camera": 0,
        "setting2_pose_frame": int(anchor),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    log.info("wrote %d frames to %s", len(entries), out)
    return out


def load_world(dataset) -> ReferenceWorld:
    from .tensorio import read_tensor_dir

    tensors, meta = read_tensor_dir(Path(dataset.root) / dataset.manifest.get("world", "world"))
    return ReferenceWorld.from_tensors(dataset.mesh, tensors, meta["n_hair"])
