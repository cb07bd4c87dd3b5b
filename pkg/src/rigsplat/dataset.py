"""On-disk dataset and mesh formats.

Dataset directory::

    manifest.json          format_version, n_expressions, image_size, cameras, frames, splits
    mesh/                  morphable mesh (tensor directory, see below)
    points/                initial point cloud: positions (P, 3) f32, colors (P, 3) f32
    frames/00000.png       8-bit linear RGB (value / 255)
    frames/00000.f32       the same image as a lossless float dump (preferred when present)
    frames/00000.params.json   {"exp": [E], "pose": [4], "camera_index": int}
    masks/00000.png        8-bit head mask, 255 = head

Mesh directory: ``manifest.json`` holds ``format_version``, counts ``V``, ``F``,
``E``, ``head_pivot`` and ``jaw_pivot``; ``tensors.bin`` holds little-endian
``vertices`` (V, 3) f32, ``blendshapes`` (E, V, 3) f32, ``jaw_weights`` (V,) f32
and ``faces`` (F, 3) u32, located through the manifest's tensor table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import ImageFileError, read_float_image, read_mask, read_png
from .mesh import MorphableMesh
from .scene import Camera, FrameRecord
from .tensorio import TensorFileError, read_tensor_dir, write_tensor_dir

FORMAT_VERSION = 1
MESH_FORMAT_VERSION = 1
SPLITS = ("train", "setting1", "setting2")


class DatasetError(OSError):
    """Missing or unreadable dataset file."""


class SchemaError(ValueError):
    """Dataset contents disagree with each other or with the format."""


def save_mesh(path, mesh: MorphableMesh) -> None:
    meta = {
        "format_version": MESH_FORMAT_VERSION,
        "V": mesh.n_vertices,
        "F": int(len(mesh.faces)),
        "E": mesh.n_expressions,
        "head_pivot": [float(v) for v in mesh.head_pivot],
        "jaw_pivot": [float(v) for v in mesh.jaw_pivot],
    }
    tensors = {
        "vertices": mesh.vertices_can.astype(np.float32),
        "blendshapes": mesh.blendshapes.astype(np.float32),
        "jaw_weights": mesh.jaw_weights.astype(np.float32),
        "faces": mesh.faces.astype(np.uint32),
    }
    write_tensor_dir(path, tensors, meta, atomic=False)


def load_mesh(path) -> MorphableMesh:
    path = Path(path)
    try:
        tensors, meta = read_tensor_dir(path)
    except TensorFileError as exc:
        raise DatasetError(str(exc)) from exc
    if meta.get("format_version") != MESH_FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported mesh format version {meta.get('format_version')}")
    for name in ("vertices", "blendshapes", "jaw_weights", "faces"):
        if name not in tensors:
            raise DatasetError(f"{path}: mesh tensor {name!r} missing")
    mesh = MorphableMesh(
        vertices_can=tensors["vertices"].astype(np.float64),
        faces=tensors["faces"].astype(np.int64),
        blendshapes=tensors["blendshapes"].astype(np.float64),
        head_pivot=np.array(meta["head_pivot"], dtype=np.float64),
        jaw_pivot=np.array(meta["jaw_pivot"], dtype=np.float64),
        jaw_weights=tensors["jaw_weights"].astype(np.float64),
    )
    counts = {"V": mesh.n_vertices, "F": len(mesh.faces), "E": mesh.n_expressions}
    for key, value in counts.items():
        if int(meta.get(key, -1)) != value:
            raise SchemaError(f"{path}: manifest says {key}={meta.get(key)}, data has {value}")
    return mesh


@dataclass
class PointSet:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class Dataset:
    root: Path
    manifest: dict
    mesh: MorphableMesh
    init_points: PointSet
    cameras: list[Camera]
    frames: list[FrameRecord] = field(default_factory=list)

    def split(self, name: str) -> list[FrameRecord]:
        return [f for f in self.frames if f.split == name]

    def frame(self, index: int) -> FrameRecord:
        for f in self.frames:
            if f.frame_index == index:
                return f
        raise KeyError(f"no frame {index}")

    @property
    def n_expressions(self) -> int:
        return self.mesh.n_expressions

    def fingerprint(self) -> str:
        return dataset_fingerprint(self.root)


def dataset_fingerprint(root) -> str:
    """SHA-256 over the manifest and every file it references."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"corrupt file {path}: {exc}") from exc


def load_dataset(path, load_images: bool = True) -> Dataset:
    root = Path(path)
    manifest = _read_json(root / "manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"{root / 'manifest.json'}: unsupported format version {manifest.get('format_version')}")
    frames_meta = manifest.get("frames")
    if not frames_meta:
        raise DatasetError(f"{root / 'manifest.json'}: no frames")
    mesh = load_mesh(root / manifest.get("mesh", "mesh"))
    e = int(manifest.get("n_expressions", -1))
    if e != mesh.n_expressions:
        raise SchemaError(f"manifest n_expressions={e} but the mesh has {mesh.n_expressions} blendshapes")
    try:
        pts, _ = read_tensor_dir(root / manifest.get("init_points", "points"))
    except TensorFileError as exc:
        raise DatasetError(str(exc)) from exc
    points = PointSet(pts["positions"].astype(np.float64),
                      pts["colors"].astype(np.float64) if "colors" in pts else None)
    cameras = [Camera.from_dict(c) for c in manifest.get("cameras", [])]
    seen: dict[str, set] = {}
    frames = []
    for entry in frames_meta:
        idx = int(entry["index"])
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise SchemaError(f"frame {idx}: unknown split {split!r}")
        if idx in seen.setdefault(split, set()):
            raise SchemaError(f"frame index {idx} repeated in split {split!r}")
        seen[split].add(idx)
        params = _read_json(root / entry["params"])
        gamma_exp = np.asarray(params["exp"], dtype=np.float64)
        if gamma_exp.shape != (e,):
            raise SchemaError(f"{root / entry['params']}: exp has {gamma_exp.size} entries, expected {e}")
        cam_index = int(params["camera_index"])
        if not 0 <= cam_index < len(cameras):
            raise SchemaError(f"{root / entry['params']}: camera_index {cam_index} out of range")
        image = mask = None
        if load_images:
            try:
                if entry.get("float_image") and (root / entry["float_image"]).exists():
                    image = read_float_image(root / entry["float_image"])
                else:
                    image = read_png(root / entry["image"])
                if entry.get("mask"):
                    mask = read_mask(root / entry["mask"])
            except ImageFileError as exc:
                raise DatasetError(str(exc)) from exc
            cam = cameras[cam_index]
            if image.shape != (cam.height, cam.width, 3):
                raise SchemaError(f"frame {idx}: image shape {image.shape} does not match its camera")
        frames.append(FrameRecord(image, cameras[cam_index], gamma_exp, params["pose"], idx, split, cam_index, mask))
    return Dataset(root, manifest, mesh, points, cameras, frames)
