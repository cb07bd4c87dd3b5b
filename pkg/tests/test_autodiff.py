import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rigsplat.autodiff import OPS, Adam, ParamGroup, Schedule, ShapeError, Tape, Tensor, adam_step, lr_at, ops
from rigsplat.autodiff.gradcheck import REL_TOL, check_function, numeric_gradient, relative_error, run_gate
from rigsplat.autodiff.tape import unbroadcast


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_registry_holds_every_op():
    expected = {"add", "sub", "mul", "div", "exp", "log", "matmul", "affine", "softplus", "sigmoid", "grid_sample",
                "axis_angle_to_matrix", "quat_to_matrix", "gaussian_filter", "rasterize"}
    import rigsplat.raster  # noqa: F401  (registers the rasterizer)
    assert expected <= set(OPS)


def test_chain_rule_and_accumulation():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        y = ops.sum(x * x + ops.exp(x) * 2.0 - x / 4.0)
    tape.backward(y)
    assert np.allclose(x.grad, 2 * x.data + 2 * np.exp(x.data) - 0.25)


def test_shared_input_gradients_add_up():
    x = leaf(2.0)
    with Tape() as tape:
        y = x * x * x
    tape.backward(y)
    assert np.isclose(x.grad, 12.0)


def test_no_tape_records_nothing():
    x = leaf([1.0])
    y = ops.exp(x)
    assert y._producer is None
    assert np.allclose(y.data, np.e)


def test_backward_needs_scalar_or_gradient():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 3.0
    with pytest.raises(ShapeError):
        tape.backward(y)
    tape.backward(y, np.ones(2))
    assert np.allclose(x.grad, 3.0)


@given(st.integers(1, 4), st.integers(1, 4))
def test_unbroadcast_sums_expanded_axes(a, b):
    g = np.ones((a, b))
    assert unbroadcast(g, (b,)).shape == (b,)
    assert np.allclose(unbroadcast(g, (b,)), a)
    assert np.allclose(unbroadcast(g, (a, 1)), b)
    assert np.isclose(unbroadcast(g, ()), a * b)


def test_ndarray_on_the_left_defers_to_tensor():
    x = leaf([1.0, 2.0])
    out = np.array([3.0, 4.0]) + x
    assert isinstance(out, Tensor)
    assert np.allclose(out.data, [4.0, 6.0])


def test_matmul_shape_error():
    with pytest.raises((ShapeError, ValueError)):
        ops.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_numeric_gradient_of_a_quadratic():
    f = lambda x: float(np.sum(x**2))  # noqa: E731
    x = np.array([0.5, -1.0, 2.0])
    assert np.allclose(numeric_gradient(f, x, 1e-5), 2 * x, atol=1e-8)
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0


@pytest.mark.parametrize("name", ["mul", "softplus", "quat_to_matrix", "grid_sample", "gaussian_filter"])
def test_sampled_instances_pass_the_gate(name):
    rng = np.random.default_rng(7)
    fn = OPS[name]
    for _ in range(3):
        inputs, kwargs = fn.sample(rng)
        assert check_function(fn, inputs, kwargs, rng) < REL_TOL


def test_gate_reports_per_op():
    res = run_gate(instances=2, names=["add", "exp"])
    assert [r.op for r in res] == ["add", "exp"]
    assert all(r.passed for r in res)


# -- optimizer --------------------------------------------------------------------


def test_first_adam_step_moves_by_lr_times_sign():
    p, m, v = adam_step(np.array([1.0, 1.0]), np.array([0.3, -2.0]), np.zeros(2), np.zeros(2), 1, 0.1)
    assert np.allclose(p, [0.9, 1.1], atol=1e-7)


def test_schedule_endpoints_are_geometric():
    s = Schedule(1e-2, 1e-4, 100)
    assert lr_at(s, 0) == pytest.approx(1e-2)
    assert lr_at(s, 50) == pytest.approx(1e-3)
    assert lr_at(s, 100) == pytest.approx(1e-4)
    assert lr_at(s, 1000) == pytest.approx(1e-4)
    assert lr_at(Schedule.constant(0.5), 77) == 0.5


def test_adam_minimises_a_quadratic_and_skips_nonfinite():
    x = leaf([3.0, -2.0])
    opt = Adam([ParamGroup("x", {"x": x}, Schedule.constant(0.1))])
    for _ in range(300):
        opt.zero_grad()
        with Tape() as tape:
            loss = ops.sum(ops.square(x - 1.0))
        tape.backward(loss)
        opt.step()
    assert np.allclose(x.data, 1.0, atol=1e-2)
    x.grad = np.array([np.nan, 0.0])
    before = x.data.copy()
    opt.step()
    assert np.array_equal(x.data, before)
    assert opt.rejected == 1


def test_remap_rows_zeroes_fresh_moments():
    x = leaf(np.ones((3, 2)))
    opt = Adam([ParamGroup("x", {"x": x}, Schedule.constant(0.1))])
    x.grad = np.ones((3, 2))
    opt.step()
    opt.remap_rows("x", np.array([2, 0, -1]))
    m, v = opt.moments["x"]
    assert m.shape == (3, 2)
    assert np.all(m[2] == 0) and np.all(m[:2] > 0)


@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_softplus_is_positive_and_above_relu(x):
    y = ops.softplus(Tensor(x), beta=10.0).data
    assert np.all(y >= np.maximum(x, 0) - 1e-12)
    assert np.all(y > 0)
