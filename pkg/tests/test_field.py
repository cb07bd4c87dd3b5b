import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rigsplat.autodiff import Tape, Tensor, ops
from rigsplat.field import (PRIOR_MODES, Anchors, DeformationConfig, DeformationField, FrameIndexError, FrameMotion,
                            frame_geometry, positional_encode)
from rigsplat.mesh import MorphableMesh, idw_weights
from rigsplat.scene import quat_to_matrix


@pytest.fixture(scope="module")
def mesh():
    return MorphableMesh.synthetic(2, 4, seed=5)


def make_field(mesh, mode="learnable", seed=0, **kw):
    rng = np.random.default_rng(seed)
    far = rng.uniform(-3, 3, (30, 3))
    far = far[np.linalg.norm(far, axis=1) > 1.6]
    pts = np.concatenate([mesh.vertices_can, mesh.vertices_can[:20] * 1.05, far])
    cfg = DeformationConfig(prior_mode=mode, triplane_resolution=kw.pop("res", 8),
                            triplane_channels=kw.pop("ch", 4), mlp_hidden=kw.pop("hidden", 16), **kw)
    fld = DeformationField.create(cfg, mesh, pts, frame_ids=[0, 1, 2], seed=seed)
    anchors = Anchors.build(pts, mesh, cfg.K, fld.threshold)
    return fld, pts, anchors


def motion(mesh, rng):
    return FrameMotion.from_params(mesh, rng.normal(0, 0.5, mesh.n_expressions), np.array([0.2, -0.3, 0.1, 0.2]))


# -- encoding ------------------------------------------------------------------


def test_positional_encoding_examples():
    assert np.allclose(positional_encode(0.5, 1), [0.5, 1.0, 0.0], atol=1e-15)
    assert positional_encode(np.zeros(3), 10).shape == (63,)
    assert positional_encode(np.zeros((5, 3)), 4).shape == (5, 27)
    assert np.array_equal(positional_encode(np.array([0.3, -0.1]), 0), [0.3, -0.1])
    with pytest.raises(ValueError):
        positional_encode(0.0, -1)


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)), st.integers(1, 6))
def test_positional_encoding_pairs_lie_on_the_unit_circle(x, n):
    pe = positional_encode(x, n)[3:].reshape(n, 3, 2)
    assert np.allclose(np.sum(pe**2, axis=-1), 1.0)


def test_config_validation(mesh):
    with pytest.raises(ValueError):
        DeformationConfig(prior_mode="spline")
    with pytest.raises(ValueError):
        DeformationConfig(K=0)
    with pytest.raises(ValueError):
        DeformationConfig(triplane_resolution=1)
    assert DeformationConfig().threshold(mesh) == pytest.approx(0.15 * mesh.bounding_radius)
    assert DeformationConfig(D=0.2).threshold(mesh) == 0.2


# -- zero-init identity ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["learnable", "none"])
def test_zero_init_far_points_do_not_move(mesh, rng, mode):
    fld, pts, anchors = make_field(mesh, mode)
    far = ~anchors.near
    assert far.any()
    rots = quat_to_matrix(rng.normal(size=(len(pts), 4)))
    ls = rng.normal(size=(len(pts), 3))
    for _ in range(3):
        res = fld.forward(mesh, anchors, pts, motion(mesh, rng), ls, frame_index=1, rotations=rots)
        assert np.array_equal(res.positions.data[far], pts[far])
        assert np.array_equal(res.rotations.data[far], rots[far])
        assert np.array_equal(res.log_scales.data, ls)


def test_zero_init_learnable_parts_are_neutral(mesh, rng):
    fld, pts, anchors = make_field(mesh)
    m = motion(mesh, rng)
    res = fld.forward(mesh, anchors, pts, m, np.zeros((len(pts), 3)), frame_index=0)
    assert np.array_equal(res.eta.data, np.zeros((len(pts), 3)))
    assert np.array_equal(res.t.data, np.zeros(3))
    assert np.array_equal(res.s_raw.data, np.zeros((len(pts), 3)))
    geom = frame_geometry(mesh, anchors, m)
    assert np.array_equal(res.r_prime.data, geom.r_mesh)
    # mesh-seeded points follow their vertex exactly
    v = mesh.n_vertices
    assert np.allclose(res.positions.data[:v], m.vertices, atol=1e-12)


def test_fixed_prior_decays_with_distance(mesh, rng):
    fld, pts, anchors = make_field(mesh, "fixed")
    m = motion(mesh, rng)
    res = fld.forward(mesh, anchors, pts, m, np.zeros((len(pts), 3)), displacement_only=True)
    sigma = fld.threshold / 3
    decay = np.exp(-anchors.mesh_distance**2 / (2 * sigma**2))
    expected = np.einsum("nk,nkc->nc", anchors.idw, m.delta_v[anchors.knn_idx]) * decay[:, None]
    assert np.allclose(res.displacement.data, expected, atol=1e-14)


def test_unknown_frame_code_raises(mesh, rng):
    fld, pts, anchors = make_field(mesh)
    with pytest.raises(FrameIndexError):
        fld.forward(mesh, anchors, pts, motion(mesh, rng), np.zeros((len(pts), 3)), frame_index=99)


# -- single-point API ------------------------------------------------------------------


def test_explicit_weights_blend_neighbour_motion(mesh):
    fld, _, _ = make_field(mesh)
    x, parts = fld.deform_position(np.zeros(3), [1.0, 1.0], [[1.0, 0, 0], [0, 1.0, 0]], weights=[0.5, 0.5])
    assert np.allclose(x, [0.5, 0.5, 0.0])
    assert np.array_equal(parts["t"], np.zeros(3))


def test_predicted_weights_one_hot_at_a_vertex(mesh):
    fld, _, _ = make_field(mesh)
    idx, dist = mesh.tree.query(mesh.vertices_can[7], fld.config.K)
    w = fld.predict_weights(mesh.vertices_can[7], dist)
    assert idx[0] == 7
    assert np.array_equal(w, np.eye(fld.config.K)[0])
    far = fld.predict_weights(np.array([2.5, 0, 0]), np.full(fld.config.K, 1.5))
    assert np.array_equal(far, np.zeros(fld.config.K))


def test_rotation_follows_rigid_neighbourhood(mesh, rng):
    fld, _, _ = make_field(mesh)
    src = rng.normal(size=(10, 3)) * 0.1
    r = quat_to_matrix(np.array([0.9, 0.1, -0.3, 0.2]))
    q = fld.deform_rotation(src[0], np.array([1.0, 0, 0, 0]), src, src @ r.T + 0.3)
    assert np.allclose(quat_to_matrix(q), r, atol=1e-10)
    q_far = fld.deform_rotation(src[0], np.array([1.0, 0, 0, 0]), src, src @ r.T, near=False)
    assert np.allclose(quat_to_matrix(q_far), np.eye(3), atol=1e-12)


def test_scale_unchanged_at_init(mesh):
    fld, _, _ = make_field(mesh)
    ls = np.array([-1.0, -2.0, 0.5])
    assert np.array_equal(fld.deform_scale(np.zeros(3), ls, np.ones((10, 3)), np.ones(10)), ls)


def test_meta_round_trip(mesh, rng):
    fld, pts, anchors = make_field(mesh, seed=3)
    fld.params = {k: (v + rng.normal(0, 0.01, v.shape)).astype(np.float32) for k, v in fld.params.items()}
    again = DeformationField.from_meta(fld.meta(), fld.params)
    m = motion(mesh, rng)
    a = fld.forward(mesh, anchors, pts, m, np.zeros((len(pts), 3)), frame_index=2)
    b = again.forward(mesh, anchors, pts, m, np.zeros((len(pts), 3)), frame_index=2)
    assert np.array_equal(a.positions.data, b.positions.data)


# -- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("mode", PRIOR_MODES)
def test_field_gradients_match_finite_differences(mesh, mode):
    rng = np.random.default_rng(11)
    fld, pts, anchors = make_field(mesh, mode, seed=2)
    # move away from the zero initialisation so every branch carries gradient
    fld.params = {k: v.astype(np.float64) + rng.normal(0, 0.05, v.shape) for k, v in fld.params.items()}
    m = motion(mesh, rng)
    sel = np.concatenate([np.arange(5), np.arange(len(pts) - 5, len(pts))])
    sub_pts, sub_anchors = pts[sel], anchors.subset(sel)
    weights = rng.normal(size=(len(sel), 3))
    rots = quat_to_matrix(rng.normal(size=(len(sel), 4)))
    frame = 1 if mode == "learnable" else None

    def loss(tensors):
        res = fld.forward(mesh, sub_anchors, sub_pts, m, np.zeros((len(sel), 3)), frame_index=frame,
                          tensors=tensors, rotations=rots)
        return ops.sum(res.positions * weights) + ops.sum(ops.square(res.rotations)) * 0.1 \
            + ops.sum(res.log_scales * 0.3)

    tensors = fld.tensors(requires_grad=True)
    with Tape() as tape:
        out = loss(tensors)
    tape.backward(out)
    names = [n for n in tensors if n.endswith(".W") or n == "triplane" or n == "T.codes"][:6]
    for name in names:
        base = tensors[name].data.copy()
        flat_idx = rng.choice(base.size, size=min(6, base.size), replace=False)

        def f(x, name=name):
            t = fld.tensors(requires_grad=False)
            t[name].data = x
            return float(loss(t).data)

        for j in flat_idx:
            e = np.zeros(base.size)
            e[j] = 1.0
            h = 1e-6
            num = (f(base + h * e.reshape(base.shape)) - f(base - h * e.reshape(base.shape))) / (2 * h)
            ana = tensors[name].grad.reshape(-1)[j]
            # entries near zero are dominated by difference noise, so allow a small absolute floor
            assert abs(ana - num) <= 1e-4 * abs(num) + 1e-8, (name, j, ana, num)


def test_position_gradient_only_through_displacement(mesh, rng):
    fld, pts, anchors = make_field(mesh)
    pos = Tensor(pts.copy(), requires_grad=True)
    with Tape() as tape:
        res = fld.forward(mesh, anchors, pts, motion(mesh, rng), np.zeros((len(pts), 3)), frame_index=0,
                          positions=pos, displacement_only=True)
        out = ops.sum(res.positions)
    tape.backward(out)
    assert np.array_equal(pos.grad, np.ones_like(pts))


def test_idw_helper_consistency(mesh):
    _, pts, anchors = make_field(mesh)
    assert np.array_equal(anchors.idw, idw_weights(anchors.knn_dist))
    assert anchors.near.dtype == bool
    both = Anchors.concat([anchors.subset(np.arange(3)), anchors.subset(np.arange(3, len(anchors)))])
    assert np.array_equal(both.knn_idx, anchors.knn_idx)
