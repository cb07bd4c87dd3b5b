"""Optimisation loop: deform, rasterize, compare, step.

One iteration draws a training frame (uniformly, from a generator seeded by
``(seed, iteration)``), deforms every canonical Gaussian into that frame,
rasterizes, evaluates the weighted loss and takes one Adam step per parameter
group. Densification and pruning run on a fixed interval until a cutoff.

Parameters are stored at float32 precision (rounded after every update) and
computed with in float64, so a checkpoint reproduces the live model exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import ops
from .autodiff.optim import Adam, ParamGroup, Schedule
from .autodiff.tape import Tape, Tensor
from .dataset import Dataset
from .field import Anchors, DeformationConfig, DeformationField, FrameMotion
from .losses import (LossError, LossWeights, dssim_loss, far_field_losses, flame_match_loss, l1_loss,
                     small_term_losses, total_loss)
from .mesh import MorphableMesh
from .raster import rasterize, render
from .raster.project import project_batch
from .scene import Camera, FrameRecord, SourceTag, quat_to_matrix
from .tensorio import TensorFileError, read_tensor_dir, write_tensor_dir

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CLOUD_PARAMS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")
INIT_OPACITY = 0.1
MID_GRAY = 0.5


class InitError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Training aborted; ``breakdown`` holds the loss terms of the failing step."""

    def __init__(self, message: str, iteration: int, breakdown: dict | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.breakdown = breakdown or {}


@dataclass
class TrainConfig:
    iterations: int = 5000
    densify_until: int = 1250
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4   # mean |dL/d(mean2d)|, pixel units
    prune_opacity_threshold: float = 5e-3
    split_scale_ratio: float = 0.01
    seed: int = 0
    prior_mode: str = "learnable"
    log_every: int = 100
    # learning rates; decays are stated as fractions of ``iterations``
    lr_position: tuple = (7e-4, 8e-6)
    position_decay_fraction: float = 0.5
    lr_field: tuple = (5e-4, 1e-5)
    field_decay_fraction: float = 1.0
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 2.5e-3
    deform: DeformationConfig = field(default_factory=DeformationConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.deform, dict):
            self.deform = DeformationConfig(**self.deform)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.lr_position = tuple(self.lr_position)
        self.lr_field = tuple(self.lr_field)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.densify_until <= self.iterations:
            raise ValueError("need 0 <= densify_until <= iterations")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        if self.prior_mode != self.deform.prior_mode:
            self.deform = DeformationConfig(**{**self.deform.to_dict(), "prior_mode": self.prior_mode})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_position"] = list(self.lr_position)
        d["lr_field"] = list(self.lr_field)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def schedules(self, extent: float) -> dict[str, Schedule]:
        n = max(self.iterations, 1)
        return {
            "positions": Schedule(self.lr_position[0] * extent, self.lr_position[1] * extent,
                                  max(1, int(round(self.position_decay_fraction * n)))),
            "field": Schedule(self.lr_field[0], self.lr_field[1], max(1, int(round(self.field_decay_fraction * n)))),
            "opacity_logits": Schedule.constant(self.lr_opacity),
            "log_scales": Schedule.constant(self.lr_scale),
            "rotations": Schedule.constant(self.lr_rotation),
            "colors": Schedule.constant(self.lr_color),
        }


def round_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _round_param(p: Tensor) -> None:
    p.data = round_f32(p.data)


def _normalize_quat(p: Tensor) -> None:
    q = p.data / np.maximum(np.linalg.norm(p.data, axis=1, keepdims=True), 1e-12)
    p.data = round_f32(q)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def scene_extent(cameras: Iterable[Camera], fallback: float) -> float:
    """1.1 times the largest distance of a camera centre from their mean."""
    centers = np.array([c.center for c in cameras])
    if len(centers) < 2:
        return float(fallback)
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) * 1.1
    return radius if radius > 1e-6 else float(fallback)


# -- model --------------------------------------------------------------------


@dataclass
class Model:
    """Everything needed to render a frame: mesh, canonical Gaussians, field."""

    mesh: MorphableMesh
    params: dict[str, Tensor]      # canonical Gaussian parameters (float64 holding f32 values)
    source_tag: np.ndarray
    field: DeformationField
    field_tensors: dict[str, Tensor]
    anchors: Anchors               # KNN of each Gaussian, fixed between densifications
    vertex_anchors: Anchors        # KNN of the canonical vertices themselves
    cameras: list[Camera]

    def __len__(self) -> int:
        return len(self.source_tag)

    def cloud_arrays(self) -> dict[str, np.ndarray]:
        out = {k: self.params[k].data.astype(np.float32) for k in CLOUD_PARAMS}
        out["source_tag"] = self.source_tag.astype(np.int32)
        return out

    def sync_field(self) -> None:
        self.field.params = {k: t.data.astype(np.float32) for k, t in self.field_tensors.items()}

    def deform(self, gamma_exp, gamma_pose, frame_index: int | None = None):
        """Deformed (positions, covariances, colors, opacities) as arrays, no tape."""
        motion = FrameMotion.from_params(self.mesh, gamma_exp, gamma_pose)
        p = {k: v.data for k, v in self.params.items()}
        rot_can = quat_to_matrix(p["rotations"])
        res = self.field.forward(self.mesh, self.anchors, p["positions"], motion, p["log_scales"],
                                 frame_index=frame_index, tensors=_detached(self.field_tensors),
                                 rotations=rot_can)
        rot = _data(res.rotations)
        m = rot * np.exp(_data(res.log_scales))[:, None, :]
        cov = m @ np.swapaxes(m, 1, 2)
        opac = 1.0 / (1.0 + np.exp(-p["opacity_logits"]))
        return _data(res.positions), cov, p["colors"], opac

    def render(self, gamma_exp, gamma_pose, camera: Camera, frame_index: int | None = None) -> np.ndarray:
        pos, cov, col, op = self.deform(gamma_exp, gamma_pose, frame_index)
        return render(project_batch(pos, cov, camera, col, op), camera).image

    def render_frame(self, frame: FrameRecord, use_code: bool = False) -> np.ndarray:
        idx = frame.frame_index if use_code and frame.frame_index in self.field.frame_ids else None
        return self.render(frame.gamma_exp, frame.gamma_pose, frame.camera, idx)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _detached(tensors: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data) for k, v in tensors.items()}


def init_scene(dataset: Dataset, config: TrainConfig) -> Model:
    """One Gaussian per canonical vertex, then one per initial point."""
    mesh = dataset.mesh
    pts = dataset.init_points
    verts = mesh.vertices_can
    positions = np.concatenate([verts, pts.positions]) if len(pts) else verts.copy()
    n = len(positions)
    if n < 4:
        raise InitError(f"need at least 4 initial points, got {n}")
    dist, _ = cKDTree(positions).query(positions, k=4)
    mean_d = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    if pts.colors is not None and len(pts):
        colors = np.concatenate([np.full((len(verts), 3), MID_GRAY), pts.colors])
    else:
        colors = np.full((n, 3), MID_GRAY)
    arrays = {
        "positions": positions,
        "rotations": np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        "log_scales": np.repeat(np.log(mean_d)[:, None], 3, axis=1),
        "opacity_logits": np.full(n, _logit(INIT_OPACITY)),
        "colors": colors,
    }
    params = {k: Tensor(round_f32(v), requires_grad=True, name=k) for k, v in arrays.items()}
    tags = np.concatenate([np.full(len(verts), SourceTag.MESH), np.full(n - len(verts), SourceTag.BACKGROUND)])
    train_ids = sorted(f.frame_index for f in dataset.split("train"))
    fld = DeformationField.create(config.deform, mesh, positions, frame_ids=train_ids, seed=config.seed)
    threshold = fld.threshold
    k = config.deform.K
    anchors = Anchors.build(params["positions"].data, mesh, k, threshold)
    vertex_anchors = Anchors.build(verts, mesh, k, threshold)
    field_tensors = {name: Tensor(v.astype(np.float64), requires_grad=True, name=name)
                     for name, v in fld.params.items()}
    return Model(mesh, params, tags.astype(np.int64), fld, field_tensors, anchors, vertex_anchors,
                 list(dataset.cameras))


# -- training state ------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    optimizer: Adam
    extent: float
    fingerprint: str = ""
    iteration: int = 0
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None
    history: list = field(default_factory=list)

    def reset_stats(self) -> None:
        n = len(self.model)
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n, dtype=np.int64)


def build_optimizer(model: Model, config: TrainConfig, extent: float) -> Adam:
    sched = config.schedules(extent)
    groups = []
    for name in CLOUD_PARAMS:
        post = _normalize_quat if name == "rotations" else _round_param
        groups.append(ParamGroup(name, {name: model.params[name]}, sched[name], post))
    groups.append(ParamGroup("field", dict(model.field_tensors), sched["field"], _round_param))
    return Adam(groups)


def create_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    model = init_scene(dataset, config)
    extent = scene_extent([f.camera for f in dataset.split("train")], model.mesh.bounding_radius)
    state = TrainState(config, model, build_optimizer(model, config, extent), extent,
                       fingerprint=dataset.fingerprint())
    state.reset_stats()
    return state


def frame_for_iteration(seed: int, iteration: int, n_frames: int) -> int:
    """Uniform frame choice that depends only on (seed, iteration)."""
    return int(np.random.default_rng([seed, iteration]).integers(n_frames))


def step_losses(model: Model, frame: FrameRecord, weights: LossWeights, stats: dict | None = None,
                frame_index: int | None = None):
    """Forward pass on the active tape; returns (total tensor, breakdown)."""
    mesh = model.mesh
    p = model.params
    motion = FrameMotion.from_params(mesh, frame.gamma_exp, frame.gamma_pose)
    rot_can = ops.quat_to_matrix(p["rotations"])
    res = model.field.forward(mesh, model.anchors, p["positions"].data, motion, p["log_scales"],
                              frame_index=frame_index, tensors=model.field_tensors,
                              positions=p["positions"], rotations=rot_can)
    m = res.rotations * ops.reshape(ops.exp(res.log_scales), (len(model), 1, 3))
    cov = ops.matmul(m, ops.swapaxes(m))
    image = rasterize(res.positions, cov, p["colors"], ops.sigmoid(p["opacity_logits"]), frame.camera, stats=stats)
    terms = {"l1": l1_loss(image, frame.image), "dssim": dssim_loss(image, frame.image)}
    vres = model.field.forward(mesh, model.vertex_anchors, mesh.vertices_can, motion, np.zeros_like(mesh.vertices_can),
                               frame_index=frame_index, tensors=model.field_tensors, displacement_only=True)
    terms["flame"] = flame_match_loss(vres.displacement, motion.delta_v)
    terms.update(far_field_losses(res.displacement, res.r_prime, res.s_raw, ~model.anchors.near))
    if model.field.config.prior_mode == "learnable":
        terms.update(small_term_losses(res.eta, res.t))
    return total_loss(terms, weights)


def train_step(state: TrainState, frame: FrameRecord) -> dict:
    """One forward/backward/update on ``frame``; returns the loss breakdown."""
    if frame.split != "train":
        raise ValueError(f"frame {frame.frame_index} is in split {frame.split!r}, not train")
    model = state.model
    stats: dict = {}
    state.optimizer.zero_grad()
    try:
        with Tape() as tape:
            total, breakdown = step_losses(model, frame, state.config.weights, stats, frame.frame_index)
    except LossError as exc:
        raise TrainingError(str(exc), state.iteration, exc.breakdown) from exc
    tape.backward(total)
    state.optimizer.step()
    if "visible" in stats:
        vis = stats["visible"]
        state.grad_accum[vis] += stats["mean2d_grad_norm"][vis]
        state.grad_count[vis] += 1
    state.iteration += 1
    return breakdown


# -- densification ------------------------------------------------------------------


def _major_axis(quats: np.ndarray, log_scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rot = quat_to_matrix(quats)
    axis = np.argmax(log_scales, axis=1)
    direction = rot[np.arange(len(quats)), :, axis]
    sigma = np.exp(log_scales[np.arange(len(quats)), axis])
    return direction, sigma


def densify_and_prune(state: TrainState) -> dict:
    """Clone, split and prune according to the accumulated gradient statistics.

    Rows that are neither split nor pruned keep their parameters and their order;
    new rows are appended with fresh optimizer moments and fresh KNN.
    """
    cfg = state.config
    model = state.model
    n = len(model)
    data = {k: model.params[k].data for k in CLOUD_PARAMS}
    avg = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    hot = avg >= cfg.densify_grad_threshold
    big = np.exp(data["log_scales"]).max(axis=1) > cfg.split_scale_ratio * state.extent
    clone = hot & ~big
    split = hot & big
    opac = 1.0 / (1.0 + np.exp(-data["opacity_logits"]))
    prune = opac < cfg.prune_opacity_threshold
    keep = ~prune & ~split

    direction, sigma = _major_axis(data["rotations"], data["log_scales"])
    clone_idx = np.flatnonzero(clone & ~prune)
    split_idx = np.flatnonzero(split & ~prune)
    new_rows = {k: [] for k in CLOUD_PARAMS}
    shift = (0.5 * sigma)[:, None] * direction
    for k in CLOUD_PARAMS:
        if k == "positions":
            new_rows[k] = [data[k][clone_idx] + shift[clone_idx],
                           data[k][split_idx] + shift[split_idx], data[k][split_idx] - shift[split_idx]]
        elif k == "log_scales":
            shrunk = data[k][split_idx] - math.log(1.6)
            new_rows[k] = [data[k][clone_idx], shrunk, shrunk]
        else:
            new_rows[k] = [data[k][clone_idx], data[k][split_idx], data[k][split_idx]]
    n_new = len(clone_idx) + 2 * len(split_idx)
    kept_idx = np.flatnonzero(keep)
    if len(kept_idx) + n_new == 0:
        log.warning("densify_and_prune would remove every Gaussian; skipped")
        return {"cloned": 0, "split": 0, "pruned": 0, "n": n}
    for k in CLOUD_PARAMS:
        arr = np.concatenate([data[k][kept_idx]] + new_rows[k])
        model.params[k].data = round_f32(arr)
    source_rows = np.concatenate([kept_idx, np.full(n_new, -1)])
    for k in CLOUD_PARAMS:
        state.optimizer.remap_rows(k, source_rows)
    model.source_tag = np.concatenate([model.source_tag[kept_idx], np.full(n_new, int(SourceTag.DENSIFIED))])
    if n_new:
        fresh = Anchors.build(model.params["positions"].data[len(kept_idx):], model.mesh,
                              model.anchors.knn_idx.shape[1], model.anchors.threshold)
        model.anchors = Anchors.concat([model.anchors.subset(kept_idx), fresh])
    else:
        model.anchors = model.anchors.subset(kept_idx)
    state.reset_stats()
    info = {"cloned": int(len(clone_idx)), "split": int(len(split_idx)), "pruned": int(prune.sum()), "n": len(model)}
    log.info("densify at %d: %s", state.iteration, info)
    return info


# -- loop ---------------------------------------------------------------------------


def train(dataset: Dataset, config: TrainConfig, state: TrainState | None = None,
          log_stream: TextIO | None = None, checkpoint_dir=None) -> TrainState:
    """Run (or resume) training to ``config.iterations``."""
    state = create_state(dataset, config) if state is None else state
    frames = dataset.split("train")
    if not frames:
        raise TrainingError("dataset has no training frames", state.iteration)
    t0 = time.perf_counter()
    while state.iteration < config.iterations:
        frame = frames[frame_for_iteration(config.seed, state.iteration, len(frames))]
        breakdown = train_step(state, frame)
        it = state.iteration
        densify = None
        if it <= config.densify_until and it % config.densify_interval == 0:
            densify = densify_and_prune(state)
        if it % config.log_every == 0 or it == config.iterations:
            record = {
                "iteration": it,
                "frame": frame.frame_index,
                "n_gaussians": len(state.model),
                "lr": state.optimizer.learning_rates(),
                "loss": breakdown,
            }
            if densify is not None:
                record["densify"] = densify
            state.history.append(record)
            if log_stream is not None:
                log_stream.write(json.dumps(record, sort_keys=True) + "\n")
                log_stream.flush()
            log.info("iter %d loss %.5f n=%d (%.1fs)", it, breakdown["total"], len(state.model),
                     time.perf_counter() - t0)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, state)
    return state


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    model = state.model
    model.sync_field()
    tensors: dict[str, np.ndarray] = {}
    for k, v in model.cloud_arrays().items():
        tensors[f"cloud.{k}"] = v
    for k, v in model.field.params.items():
        tensors[f"field.{k}"] = v
    tensors["anchors.knn_idx"] = model.anchors.knn_idx.astype(np.int64)
    tensors["anchors.knn_dist"] = model.anchors.knn_dist.astype(np.float64)
    tensors["mesh.vertices"] = model.mesh.vertices_can.astype(np.float32)
    tensors["mesh.blendshapes"] = model.mesh.blendshapes.astype(np.float32)
    tensors["mesh.jaw_weights"] = model.mesh.jaw_weights.astype(np.float32)
    tensors["mesh.faces"] = model.mesh.faces.astype(np.uint32)
    for name, (m, v) in state.optimizer.moments.items():
        tensors[f"adam.m.{name}"] = m.astype(np.float64)
        tensors[f"adam.v.{name}"] = v.astype(np.float64)
    tensors["densify.grad_accum"] = state.grad_accum.astype(np.float64)
    tensors["densify.grad_count"] = state.grad_count.astype(np.int64)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "rigsplat-checkpoint",
        "iteration": state.iteration,
        "dataset_fingerprint": state.fingerprint,
        "extent": state.extent,
        "train_config": state.config.to_dict(),
        "field": model.field.meta(),
        "mesh": {"head_pivot": model.mesh.head_pivot.tolist(), "jaw_pivot": model.mesh.jaw_pivot.tolist()},
        "cameras": [c.to_dict() for c in model.cameras],
        "optimizer": {"step_count": state.optimizer.step_count, "rejected": state.optimizer.rejected},
    }
    write_tensor_dir(path, tensors, meta, atomic=True)


class CheckpointError(OSError):
    pass


def load_checkpoint(path) -> TrainState:
    try:
        tensors, meta = read_tensor_dir(path)
    except TensorFileError as exc:
        raise CheckpointError(str(exc)) from exc
    if meta.get("kind") != "rigsplat-checkpoint" or meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a supported checkpoint")
    config = TrainConfig.from_dict(meta["train_config"])
    mesh = MorphableMesh(
        tensors["mesh.vertices"], tensors["mesh.faces"].astype(np.int64), tensors["mesh.blendshapes"],
        np.array(meta["mesh"]["head_pivot"]), np.array(meta["mesh"]["jaw_pivot"]), tensors["mesh.jaw_weights"],
    )
    fparams = {k[len("field."):]: v for k, v in tensors.items() if k.startswith("field.")}
    fld = DeformationField.from_meta(meta["field"], fparams)
    params = {k: Tensor(tensors[f"cloud.{k}"].astype(np.float64), requires_grad=True, name=k) for k in CLOUD_PARAMS}
    threshold = fld.threshold
    anchors = Anchors(tensors["anchors.knn_idx"].astype(np.int64), tensors["anchors.knn_dist"], threshold)
    vertex_anchors = Anchors.build(mesh.vertices_can, mesh, config.deform.K, threshold)
    field_tensors = {k: Tensor(v.astype(np.float64), requires_grad=True, name=k) for k, v in fparams.items()}
    cameras = [Camera.from_dict(c) for c in meta["cameras"]]
    model = Model(mesh, params, tensors["cloud.source_tag"].astype(np.int64), fld, field_tensors, anchors,
                  vertex_anchors, cameras)
    extent = float(meta["extent"])
    opt = build_optimizer(model, config, extent)
    opt.step_count = int(meta["optimizer"]["step_count"])
    opt.rejected = int(meta["optimizer"]["rejected"])
    for k in list(tensors):
        if k.startswith("adam.m."):
            name = k[len("adam.m."):]
            opt.moments[name] = (tensors[k], tensors[f"adam.v.{name}"])
    state = TrainState(config, model, opt, extent, meta.get("dataset_fingerprint", ""), int(meta["iteration"]))
    state.grad_accum = tensors["densify.grad_accum"]
    state.grad_count = tensors["densify.grad_count"]
    return state


# -- driving -------------------------------------------------------------------------


@dataclass
class DriveEntry:
    gamma_exp: np.ndarray
    gamma_pose: np.ndarray
    camera: Camera


def parse_drive(entries: list, cameras: list[Camera], n_expressions: int) -> list[DriveEntry]:
    """Validate a list of ``{exp, pose, camera}`` dicts; ``camera`` is an index or an inline camera."""
    out = []
    for i, e in enumerate(entries):
        exp = np.asarray(e.get("exp", np.zeros(n_expressions)), dtype=np.float64)
        pose = np.asarray(e.get("pose", np.zeros(4)), dtype=np.float64)
        if exp.shape != (n_expressions,):
            raise ValueError(f"drive entry {i}: exp has {exp.size} entries, expected {n_expressions}")
        if pose.shape != (4,):
            raise ValueError(f"drive entry {i}: pose has {pose.size} entries, expected 4")
        cam = e.get("camera", 0)
        if isinstance(cam, dict):
            camera = Camera.from_dict(cam)
        else:
            if not 0 <= int(cam) < len(cameras):
                raise ValueError(f"drive entry {i}: camera index {cam} out of range")
            camera = cameras[int(cam)]
        out.append(DriveEntry(exp, pose, camera))
    return out


def reanimate(model: Model, drive: list[DriveEntry]) -> list[np.ndarray]:
    """Render each drive entry without per-frame offsets."""
    e = model.mesh.n_expressions
    images = []
    for i, d in enumerate(drive):
        if np.shape(d.gamma_exp) != (e,) or np.shape(d.gamma_pose) != (4,):
            raise ValueError(f"drive entry {i}: expected exp ({e},) and pose (4,)")
        images.append(model.render(d.gamma_exp, d.gamma_pose, d.camera))
    return images
