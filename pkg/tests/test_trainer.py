import dataclasses
import io
import json

import numpy as np
import pytest

from rigsplat.autodiff import Tape
from rigsplat.scene import SourceTag
from rigsplat.trainer import (CheckpointError, TrainConfig, TrainingError, create_state, densify_and_prune,
                              frame_for_iteration, init_scene, load_checkpoint, parse_drive, reanimate,
                              save_checkpoint, scene_extent, step_losses, train, train_step)


def small_config(**kw):
    base = dict(iterations=20, densify_until=10, densify_interval=5, log_every=5)
    return TrainConfig(**{**base, **kw})


@pytest.fixture
def state(small_dataset):
    return create_state(small_dataset, small_config())


def test_initial_cloud_layout(small_dataset):
    model = init_scene(small_dataset, small_config())
    v = small_dataset.mesh.n_vertices
    n_pts = len(small_dataset.init_points)
    assert len(model) == v + n_pts == 1642
    assert np.all(model.source_tag[:v] == SourceTag.MESH)
    assert np.all(model.source_tag[v:] == SourceTag.BACKGROUND)
    assert np.array_equal(model.params["positions"].data[:v], small_dataset.mesh.vertices_can)
    assert np.allclose(1 / (1 + np.exp(-model.params["opacity_logits"].data)), 0.1, atol=1e-6)
    # stored values are exactly representable in single precision
    for p in model.params.values():
        assert np.array_equal(p.data, p.data.astype(np.float32))


def test_initial_render_is_deterministic(small_dataset):
    f = small_dataset.frame(3)
    a = init_scene(small_dataset, small_config()).render_frame(f)
    b = init_scene(small_dataset, small_config()).render_frame(f)
    assert np.array_equal(a, b)


def test_far_field_background_is_static_at_init(small_dataset):
    model = init_scene(small_dataset, small_config())
    far = ~model.anchors.near
    assert far.sum() > 500
    ref = model.deform(np.zeros(8), np.zeros(4))[0][far]
    for f in small_dataset.frames:
        assert np.array_equal(model.deform(f.gamma_exp, f.gamma_pose, None)[0][far], ref)


def test_scene_extent_covers_the_cameras(small_dataset):
    cams = [f.camera for f in small_dataset.split("train")]
    centers = np.array([c.center for c in cams])
    ext = scene_extent(cams, 1.0)
    assert ext == pytest.approx(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max())
    assert scene_extent([cams[0]], 2.5) == 2.5


def test_frame_choice_depends_only_on_seed_and_iteration():
    seq = [frame_for_iteration(3, i, 10) for i in range(50)]
    assert seq == [frame_for_iteration(3, i, 10) for i in range(50)]
    assert seq != [frame_for_iteration(4, i, 10) for i in range(50)]
    assert set(seq) <= set(range(10))


# -- losses and steps ------------------------------------------------------------------


def test_first_step_loss_is_positive(state, small_dataset):
    breakdown = train_step(state, small_dataset.split("train")[0])
    assert breakdown["total"] > 0
    assert state.iteration == 1


def test_self_rendered_frames_are_a_fixed_point(small_dataset):
    model = init_scene(small_dataset, small_config())
    for f in small_dataset.split("train")[:3]:
        target = dataclasses.replace(f, image=model.render_frame(f, use_code=True))
        with Tape() as tape:
            total, breakdown = step_losses(model, target, TrainConfig().weights, None, f.frame_index)
        tape.backward(total)
        assert breakdown["total"] < 1e-6
        grads = [t.grad for t in model.params.values()] + [t.grad for t in model.field_tensors.values()]
        assert max(np.abs(g).max() for g in grads if g is not None) < 1e-4
        for t in list(model.params.values()) + list(model.field_tensors.values()):
            t.grad = None


def test_held_out_frames_are_not_trained_on(state, small_dataset):
    with pytest.raises(ValueError):
        train_step(state, small_dataset.split("setting1")[0])


def test_non_finite_loss_raises_training_error(state, small_dataset):
    state.model.params["colors"].data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        train_step(state, small_dataset.split("train")[0])
    assert err.value.iteration == 0
    assert "l1" in err.value.breakdown


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(iterations=10, densify_until=20)
    cfg = TrainConfig(iterations=100, densify_until=25, prior_mode="fixed")
    assert cfg.deform.prior_mode == "fixed"
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


# -- densification ----------------------------------------------------------------


def _cloud(state):
    return {k: v.copy() for k, v in state.model.cloud_arrays().items()}


def test_densify_without_signal_is_a_no_op(state):
    before = _cloud(state)
    info = densify_and_prune(state)
    after = _cloud(state)
    assert info["cloned"] == info["split"] == info["pruned"] == 0
    for k in before:
        assert np.array_equal(before[k], after[k])


def test_low_opacity_is_pruned(state):
    n = len(state.model)
    state.model.params["opacity_logits"].data[7] = np.log(1e-4 / (1 - 1e-4))
    gone = state.model.params["positions"].data[7].copy()
    densify_and_prune(state)
    assert len(state.model) == n - 1
    assert not np.any(np.all(state.model.params["positions"].data == gone, axis=1))
    assert len(state.model.anchors.knn_idx) == n - 1


def test_hot_small_gaussian_is_cloned(state, small_dataset):
    train_step(state, small_dataset.split("train")[0])  # so that optimizer moments exist
    state.reset_stats()
    n = len(state.model)
    state.model.params["log_scales"].data[9] = np.log(1e-3)
    state.grad_accum[9], state.grad_count[9] = 1.0, 1
    densify_and_prune(state)
    p = state.model.params
    assert len(state.model) == n + 1
    assert state.model.source_tag[-1] == SourceTag.DENSIFIED
    assert np.array_equal(p["log_scales"].data[-1], p["log_scales"].data[9])
    assert np.linalg.norm(p["positions"].data[-1] - p["positions"].data[9]) < 1e-2
    # stats restart and fresh rows have zero optimizer moments
    assert np.all(state.grad_accum == 0) and len(state.grad_accum) == n + 1
    m, v = state.optimizer.moments["positions"]
    assert m.shape[0] == n + 1 and np.all(m[-1] == 0) and np.all(v[-1] == 0)
    assert np.any(m[:n] != 0)


def test_hot_large_gaussian_is_split(state):
    n = len(state.model)
    state.model.params["log_scales"].data[11] = np.log([1.0, 0.2, 0.1])
    state.grad_accum[11], state.grad_count[11] = 1.0, 1
    centre = state.model.params["positions"].data[11].copy()
    densify_and_prune(state)
    p = state.model.params
    assert len(state.model) == n + 1
    a, b = p["positions"].data[-2:]
    assert np.allclose((a + b) / 2, centre, atol=1e-6)
    assert np.allclose(p["log_scales"].data[-1], np.log([1.0, 0.2, 0.1]) - np.log(1.6), atol=1e-6)


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(small_dataset, tmp_path):
    st = train(small_dataset, small_config(iterations=6, densify_until=5))
    save_checkpoint(tmp_path / "a", st)
    back = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", back)
    for name in ("tensors.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # resuming from disk continues exactly as the in-memory state would
    cfg = small_config(iterations=10, densify_until=5)
    st.config = back.config = cfg
    train(small_dataset, cfg, state=st)
    train(small_dataset, cfg, state=back)
    save_checkpoint(tmp_path / "c", st)
    save_checkpoint(tmp_path / "d", back)
    assert (tmp_path / "c" / "tensors.bin").read_bytes() == (tmp_path / "d" / "tensors.bin").read_bytes()


def test_bad_checkpoint_is_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none")


def test_training_log_is_json_lines(small_dataset):
    buf = io.StringIO()
    train(small_dataset, small_config(iterations=10, densify_until=10), log_stream=buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert [r["iteration"] for r in lines] == [5, 10]
    assert "densify" in lines[0] and "total" in lines[0]["loss"]


# -- reanimation ------------------------------------------------------------------


def test_reanimate_identity_and_view_dependence(small_dataset):
    model = init_scene(small_dataset, small_config())
    e = small_dataset.n_expressions
    drive = parse_drive([{"exp": [0.0] * e, "pose": [0.0] * 4, "camera": 0},
                         {"exp": [0.0] * e, "pose": [0.0] * 4, "camera": len(model.cameras) - 1}],
                        model.cameras, e)
    a, b = reanimate(model, drive)
    assert np.array_equal(a, model.render_frame(small_dataset.frame(0)))
    assert np.abs(a - b).max() > 1e-3


def test_drive_validation(small_dataset):
    cams = small_dataset.cameras
    with pytest.raises(ValueError):
        parse_drive([{"exp": [0.0] * 3}], cams, 8)
    with pytest.raises(ValueError):
        parse_drive([{"pose": [0.0] * 3}], cams, 8)
    with pytest.raises(ValueError):
        parse_drive([{"camera": 999}], cams, 8)
    inline = parse_drive([{"camera": cams[1].to_dict()}], cams, 8)[0]
    assert inline.camera.to_dict() == cams[1].to_dict()


# -- convergence ------------------------------------------------------------------


@pytest.mark.slow
def test_500_steps_halve_the_loss(fixture_dataset):
    cfg = TrainConfig(iterations=500, densify_until=125)
    frame = fixture_dataset.frame(0)
    first = create_state(fixture_dataset, cfg)
    with Tape():
        before = step_losses(first.model, frame, cfg.weights, None, 0)[1]["total"]
    st = train(fixture_dataset, cfg)
    with Tape():
        after = step_losses(st.model, frame, cfg.weights, None, 0)[1]["total"]
    assert after < 0.5 * before, (before, after)
