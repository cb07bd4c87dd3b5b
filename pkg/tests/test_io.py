"""Tensor and image files, dataset loading and the synthetic generator."""

import json
import shutil

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rigsplat.dataset import DatasetError, SchemaError, dataset_fingerprint, load_dataset, load_mesh, save_mesh
from rigsplat.images import (ImageFileError, read_float_image, read_mask, read_png, write_float_image, write_mask,
                             write_png)
from rigsplat.mesh import MorphableMesh, vertex_deformations
from rigsplat.synth import SynthConfig, generate, load_world, silhouette_mask
from rigsplat.tensorio import TensorFileError, read_tensor_dir, write_tensor_dir

from conftest import SMALL

# -- tensor directories ----------------------------------------------------------------


def test_tensor_dir_round_trip(tmp_path, rng):
    data = {"a": rng.normal(size=(3, 4)), "b": rng.integers(0, 9, 5).astype(np.int32),
            "c": rng.normal(size=2).astype(np.float32), "d": np.array([1, 2], dtype=np.uint8)}
    write_tensor_dir(tmp_path / "t", data, {"kind": "demo"})
    back, meta = read_tensor_dir(tmp_path / "t")
    assert meta == {"kind": "demo"}
    for k, v in data.items():
        assert back[k].dtype == v.dtype
        assert np.array_equal(back[k], v)
    # overwriting in place leaves no temporary directories behind
    write_tensor_dir(tmp_path / "t", {"a": np.zeros(1)})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["t"]
    assert list(read_tensor_dir(tmp_path / "t")[0]) == ["a"]


def test_tensor_dir_errors(tmp_path):
    with pytest.raises(TensorFileError):
        read_tensor_dir(tmp_path / "missing")
    with pytest.raises(TypeError):
        write_tensor_dir(tmp_path / "x", {"a": np.zeros(2, dtype=complex)})
    write_tensor_dir(tmp_path / "t", {"a": np.zeros(10)})
    blob = tmp_path / "t" / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:16])
    with pytest.raises(TensorFileError):
        read_tensor_dir(tmp_path / "t")


# -- images ------------------------------------------------------------------


@given(arrays(np.float32, (3, 5, 3), elements=st.floats(0, 1, width=32)))
def test_float_image_round_trip_is_exact(img):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x.f32"
        write_float_image(p, img)
        assert np.array_equal(read_float_image(p), img.astype(np.float64))


def test_png_round_trip_within_quantisation(tmp_path, rng):
    img = rng.uniform(size=(6, 7, 3))
    write_png(tmp_path / "lin.png", img, srgb=False)
    assert np.abs(read_png(tmp_path / "lin.png") - img).max() <= 0.5 / 255 + 1e-12
    write_png(tmp_path / "s.png", img, srgb=True)
    raw = read_png(tmp_path / "s.png")
    assert np.abs(raw - img ** (1 / 2.2)).max() <= 0.5 / 255 + 1e-12
    mask = rng.uniform(size=(6, 7)) > 0.5
    write_mask(tmp_path / "m.png", mask)
    assert np.array_equal(read_mask(tmp_path / "m.png"), mask)


def test_image_errors(tmp_path):
    (tmp_path / "bad.f32").write_bytes(b"nope")
    with pytest.raises(ImageFileError):
        read_float_image(tmp_path / "bad.f32")
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ImageFileError):
        read_png(tmp_path / "bad.png")


# -- mesh files and datasets ------------------------------------------------------------------


def test_mesh_file_round_trip(tmp_path):
    mesh = MorphableMesh.synthetic(1, 3, seed=2)
    save_mesh(tmp_path / "m", mesh)
    back = load_mesh(tmp_path / "m")
    # geometry is stored in single precision
    assert np.array_equal(back.vertices_can, mesh.vertices_can.astype(np.float32))
    assert np.array_equal(back.blendshapes, mesh.blendshapes.astype(np.float32))
    assert np.array_equal(back.faces, mesh.faces)


def test_default_mesh_has_642_vertices(small_dataset_dir):
    tensors, _ = read_tensor_dir(small_dataset_dir / "mesh")
    assert len(load_mesh(small_dataset_dir / "mesh").vertices_can) == 642
    assert any(v.shape[:1] == (642,) for v in tensors.values())


def _copy(src, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    return dst


def test_dataset_errors(small_dataset_dir, tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nothing")
    root = _copy(small_dataset_dir, tmp_path)
    manifest = json.loads((root / "manifest.json").read_text())

    bad = {**manifest, "format_version": 99}
    (root / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(SchemaError):
        load_dataset(root)

    bad = {**manifest, "n_expressions": manifest["n_expressions"] + 1}
    (root / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(SchemaError):
        load_dataset(root)

    (root / "manifest.json").write_text(json.dumps(manifest))
    params = root / manifest["frames"][0]["params"]
    p = json.loads(params.read_text())
    params.write_text(json.dumps({**p, "camera_index": 999}))
    with pytest.raises(SchemaError):
        load_dataset(root)
    params.write_text(json.dumps(p))
    (root / manifest["frames"][0]["float_image"]).unlink()
    (root / manifest["frames"][0]["image"]).write_bytes(b"garbage")
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_dataset_without_images(small_dataset_dir):
    ds = load_dataset(small_dataset_dir, load_images=False)
    assert all(f.image is None for f in ds.frames)
    assert len(ds.split("train")) == SMALL["n_train"]


# -- generator ----------------------------------------------------------------


def test_generator_is_byte_deterministic(small_dataset_dir, tmp_path):
    again = generate(SynthConfig(**SMALL), tmp_path / "again")
    assert dataset_fingerprint(again) == dataset_fingerprint(small_dataset_dir)
    other = generate(SynthConfig(**{**SMALL, "seed": 1}), tmp_path / "other")
    assert dataset_fingerprint(other) != dataset_fingerprint(small_dataset_dir)


def test_frame_zero_is_canonical(small_dataset):
    f0 = small_dataset.frame(0)
    assert np.array_equal(f0.gamma_exp, np.zeros(small_dataset.n_expressions))
    assert np.array_equal(f0.gamma_pose, np.zeros(4))
    assert np.array_equal(vertex_deformations(small_dataset.mesh, f0.gamma_exp, f0.gamma_pose), np.zeros((642, 3)))


def test_held_out_splits_structure(small_dataset):
    ds = small_dataset
    m = ds.manifest
    train = ds.split("train")
    train_cams = {f.camera_index for f in train}
    train_keys = {(f.gamma_exp.tobytes(), f.gamma_pose.tobytes(), f.camera_index) for f in train}
    s1, s2 = ds.split("setting1"), ds.split("setting2")
    assert len(s1) == SMALL["n_setting1"] and len(s2) == SMALL["n_setting2"]
    # setting 1: the training camera, new parameters
    assert all(f.camera_index == m["setting1_camera"] in train_cams for f in s1)
    # setting 2: a training pose, cameras never used in training
    anchor = ds.frame(m["setting2_pose_frame"])
    assert anchor.split == "train"
    assert all(np.array_equal(f.gamma_pose, anchor.gamma_pose) for f in s2)
    assert not {f.camera_index for f in s2} & train_cams
    for f in s1 + s2:
        assert (f.gamma_exp.tobytes(), f.gamma_pose.tobytes(), f.camera_index) not in train_keys
    assert m["splits"]["setting1"] == [f.frame_index for f in s1]


def test_stored_images_match_the_production_renderer(small_dataset):
    world = load_world(small_dataset)
    for f in small_dataset.frames:
        img = world.render(f.gamma_exp, f.gamma_pose, f.camera, reference=False)
        assert np.abs(img - f.image).max() <= 1e-5
        png = read_png(small_dataset.root / f"frames/{f.frame_index:05d}.png")
        assert np.abs(png - f.image).max() <= 0.5 / 255 + 1e-6


def test_masks_cover_the_projected_head(small_dataset):
    for f in small_dataset.frames:
        assert f.mask.dtype == bool and f.mask.any() and not f.mask.all()
    f = small_dataset.frame(0)
    undilated = silhouette_mask(small_dataset.mesh, small_dataset.mesh.vertices_can, f.camera, 0)
    assert np.all(f.mask[undilated])
    assert f.mask.sum() > undilated.sum()


def test_mesh_splats_follow_their_vertex(small_dataset, rng):
    world = load_world(small_dataset)
    exp = rng.uniform(-1, 1, small_dataset.n_expressions)
    pose = np.array([0.2, -0.3, 0.1, 0.3])
    pos, rot, *_ = world.state(exp, pose)
    from rigsplat.mesh import evaluate_mesh

    assert np.array_equal(pos[:642], evaluate_mesh(world.mesh, exp, pose))
    assert np.allclose(rot @ np.swapaxes(rot, 1, 2), np.eye(3), atol=1e-10)


def test_unwritable_output_is_an_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate(SynthConfig(**SMALL), blocker / "sub")
