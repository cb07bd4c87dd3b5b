import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rigsplat.autodiff import ShapeError, Tape, Tensor
from rigsplat.losses import (SSIM_C1, TERMS, LossError, LossWeights, dssim_loss, far_field_losses, flame_match_loss,
                             l1_loss, small_term_losses, total_loss)
from rigsplat.mesh import dwavg
from rigsplat.scene import axis_angle_to_matrix

images = arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1))


def val(t):
    return float(t.data)


def test_l1_examples():
    z, o = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
    assert val(l1_loss(z, z)) == 0
    assert val(l1_loss(z, o)) == 1
    half = z.copy()
    half[:2] = 0.5
    assert val(l1_loss(half, z)) == pytest.approx(0.25)
    with pytest.raises(ShapeError):
        l1_loss(z, np.zeros((4, 4, 1)))


def test_dssim_examples():
    x = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert val(dssim_loss(x, x)) == pytest.approx(0, abs=1e-12)
    a, b = 0.3, 0.7
    expected = (1 - (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)) / 2
    assert val(dssim_loss(np.full((16, 16, 3), a), np.full((16, 16, 3), b))) == pytest.approx(expected, rel=1e-10)
    y = x.copy()
    y[10, 10] = 1 - y[10, 10]
    assert val(dssim_loss(x, y)) > 0
    with pytest.raises(ValueError):
        dssim_loss(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


@given(images, images)
def test_dssim_symmetric_and_bounded(x, y):
    d1, d2 = val(dssim_loss(x, y)), val(dssim_loss(y, x))
    assert d1 == pytest.approx(d2, abs=1e-9)
    assert -1e-12 <= d1 <= 1.0 + 1e-12
    assert val(dssim_loss(x, x)) == pytest.approx(0, abs=1e-9)


def test_flame_match_examples(rng):
    dv = rng.normal(size=(50, 3))
    assert val(flame_match_loss(np.zeros((50, 3)), np.zeros((50, 3)))) == 0
    assert val(flame_match_loss(dv, dv)) == 0
    # prior-only field at the vertices: IDW average of neighbour displacements
    idx = rng.integers(0, 50, size=(50, 4))
    dist = rng.uniform(0.1, 1, size=(50, 4))
    prior = np.array([dwavg(dv[i], d) for i, d in zip(idx, dist)])
    direct = np.mean(np.sum((prior - dv) ** 2, axis=1))
    assert val(flame_match_loss(prior, dv)) == pytest.approx(direct, rel=1e-14)


def test_far_field_examples():
    disp = np.zeros((3, 3))
    rot = np.tile(np.eye(3), (3, 1, 1))
    s_raw = np.zeros((3, 3))
    far = np.array([False, True, False])
    zero = far_field_losses(disp, rot, s_raw, far)
    assert all(val(v) == 0 for v in zero.values())
    disp[1] = [0.1, 0, 0]
    assert val(far_field_losses(disp, rot, s_raw, far)["global_def"]) == pytest.approx(0.01)
    theta = 0.7
    rot[1] = axis_angle_to_matrix(np.array([0, 0, theta]))
    assert val(far_field_losses(disp, rot, s_raw, far)["global_rot"]) == pytest.approx(4 * (1 - np.cos(theta)))
    # near points do not count towards the displacement and rotation terms
    disp[0] = 5.0
    assert val(far_field_losses(disp, rot, s_raw, far)["global_def"]) == pytest.approx(0.01)
    empty = far_field_losses(disp, rot, s_raw, np.zeros(3, bool))
    assert val(empty["global_def"]) == 0 and val(empty["global_rot"]) == 0
    s_raw[2] = np.log(2.0)
    assert val(far_field_losses(disp, rot, s_raw, far)["global_scale"]) == pytest.approx(3 / 9)


def test_small_term_examples():
    z = small_term_losses(np.zeros((5, 3)), np.zeros(3))
    assert val(z["eta"]) == 0 and val(z["t"]) == 0
    out = small_term_losses(np.tile([0, 0.2, 0], (5, 1)), np.array([0.3, 0, 0]))
    assert val(out["eta"]) == pytest.approx(0.04)
    assert val(out["t"]) == pytest.approx(0.09)


@given(arrays(np.float64, (6, 3), elements=st.floats(-3, 3)), arrays(np.float64, (6, 3, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (6, 3), elements=st.floats(-2, 2)), arrays(bool, 6))
def test_every_term_is_non_negative(disp, rot, s_raw, far):
    terms = {**far_field_losses(disp, rot, s_raw, far), **small_term_losses(disp, disp[0])}
    terms["flame"] = flame_match_loss(disp, s_raw)
    terms["l1"] = l1_loss(disp, s_raw)
    assert all(val(v) >= 0 for v in terms.values())


# -- weighted sum -----------------------------------------------------------------


def test_total_loss_examples():
    zero = {k: Tensor(np.array(0.0)) for k in TERMS}
    assert val(total_loss(zero)[0]) == 0
    assert val(total_loss({**zero, "l1": Tensor(np.array(1.0))})[0]) == 0.8
    assert val(total_loss({**zero, "global_def": Tensor(np.array(1.0))})[0]) == 0.1


@pytest.mark.parametrize("term", TERMS)
def test_unit_impulse_recovers_each_coefficient(term):
    w = LossWeights()
    total, breakdown = total_loss({term: Tensor(np.array(1.0))}, w)
    assert abs(val(total) - w.by_term()[term]) <= 1e-12
    assert breakdown[term] == 1.0


@given(st.sampled_from(TERMS), arrays(np.float64, len(TERMS), elements=st.floats(0, 10)), st.floats(-1, 1))
def test_total_is_linear_in_each_term(term, values, delta):
    base = dict(zip(TERMS, values))
    bumped = {**base, term: base[term] + delta}
    a = val(total_loss({k: Tensor(np.array(v)) for k, v in base.items()})[0])
    b = val(total_loss({k: Tensor(np.array(v)) for k, v in bumped.items()})[0])
    assert b - a == pytest.approx(delta * LossWeights().by_term()[term], abs=1e-9)


def test_total_gradient_carries_the_weights():
    x = Tensor(np.array(2.0), requires_grad=True)
    with Tape() as tape:
        total, _ = total_loss({"dssim": x, "eta": x})
    tape.backward(total)
    assert x.grad == pytest.approx(0.2 + 1e-3)


def test_non_finite_term_names_the_term():
    with pytest.raises(LossError) as err:
        total_loss({"l1": Tensor(np.array(1.0)), "flame": Tensor(np.array(np.nan))})
    assert err.value.term == "flame"
    with pytest.raises(KeyError):
        total_loss({"lpips": Tensor(np.array(1.0))})
    with pytest.raises(ValueError):
        LossWeights(w_l1=-1)
