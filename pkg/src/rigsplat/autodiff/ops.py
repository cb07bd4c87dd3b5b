"""The differentiable op set used by the deformation networks and losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tape import Function, ShapeError, Tensor, register, unbroadcast


def _normal(rng, *shape):
    return rng.standard_normal(shape)


# -- elementwise binary -------------------------------------------------------------


@register
class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return np.add(a, b)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return unbroadcast(g, sa), unbroadcast(g, sb)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 4, 3), _normal(rng, 3)], {}


@register
class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return np.subtract(a, b)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 2, 1, 3), _normal(rng, 5, 1)], {}


@register
class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return np.multiply(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = unbroadcast(g * b, a.shape) if ctx.needs[0] else None
        gb = unbroadcast(g * a, b.shape) if ctx.needs[1] else None
        return ga, gb

    @staticmethod
    def sample(rng):
        return [_normal(rng, 4, 3), _normal(rng, 4, 1)], {}


@register
class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return np.divide(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = unbroadcast(g / b, a.shape) if ctx.needs[0] else None
        gb = unbroadcast(-g * a / (b * b), b.shape) if ctx.needs[1] else None
        return ga, gb

    @staticmethod
    def sample(rng):
        return [_normal(rng, 3, 4), rng.uniform(0.5, 2.0, (4,)) * rng.choice([-1, 1], 4)], {}


# -- elementwise unary --------------------------------------------------------------


@register
class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return np.negative(a)

    @staticmethod
    def backward(ctx, g):
        return (-g,)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 5)], {}


@register
class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g * out,)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 3, 3)], {}


@register
class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (g / a,)

    @staticmethod
    def sample(rng):
        return [rng.uniform(0.2, 3.0, (6,))], {}


@register
class Sin(Function):
    name = "sin"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.sin(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (g * np.cos(a),)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 4, 2) * 3], {}


@register
class Cos(Function):
    name = "cos"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.cos(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (-g * np.sin(a),)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 4, 2) * 3], {}


@register
class Abs(Function):
    name = "abs"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.abs(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (g * np.sign(a),)

    @staticmethod
    def sample(rng):
        x = _normal(rng, 7)
        return [np.where(np.abs(x) < 0.05, 0.5, x)], {}


@register
class Square(Function):
    name = "square"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return a * a

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (2.0 * g * a,)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 3, 2)], {}


@register
class Sqrt(Function):
    name = "sqrt"

    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (0.5 * g / out,)

    @staticmethod
    def sample(rng):
        return [rng.uniform(0.3, 4.0, (5,))], {}


@register
class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        out = expit(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g * out * (1.0 - out),)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 6) * 2], {}


@register
class Softplus(Function):
    """``log(1 + exp(beta x)) / beta``."""

    name = "softplus"

    @staticmethod
    def forward(ctx, a, beta=1.0):
        ctx.save(a, beta)
        return np.logaddexp(0.0, beta * a) / beta

    @staticmethod
    def backward(ctx, g):
        a, beta = ctx.saved
        return (g * expit(beta * a),)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 4, 5) * 0.3], {"beta": 10.0}


@register
class Clip(Function):
    name = "clip"

    @staticmethod
    def forward(ctx, a, lo=-1.0, hi=1.0):
        ctx.save((a > lo) & (a < hi))
        return np.clip(a, lo, hi)

    @staticmethod
    def backward(ctx, g):
        (inside,) = ctx.saved
        return (g * inside,)

    @staticmethod
    def sample(rng):
        x = rng.uniform(-2, 2, (8,))
        return [np.where(np.abs(np.abs(x) - 1) < 0.05, 0.3, x)], {"lo": -1.0, "hi": 1.0}


# -- reductions and shape ops ---------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


@register
class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(a.shape, axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx.saved
        return (np.array(_expand(g, shape, axis, keepdims)),)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 3, 4, 2)], {"axis": 1}


@register
class Mean(Function):
    name = "mean"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        out = np.mean(a, axis=axis, keepdims=keepdims)
        ctx.save(a.shape, axis, keepdims, a.size // max(np.size(out), 1))
        return out

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims, count = ctx.saved
        return (np.array(_expand(g, shape, axis, keepdims)) / count,)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 3, 4)], {"axis": (0, 1)}


@register
class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape=(-1,)):
        ctx.save(a.shape)
        return np.reshape(a, shape)

    @staticmethod
    def backward(ctx, g):
        (shape,) = ctx.saved
        return (np.reshape(g, shape),)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 2, 6)], {"shape": (3, 4)}


@register
class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        ctx.save(np.argsort(axes))
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        (inv,) = ctx.saved
        return (np.transpose(g, inv),)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 2, 3, 4)], {"axes": (0, 2, 1)}


@register
class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=-1):
        ctx.save(axis, np.cumsum([a.shape[axis] for a in arrays])[:-1])
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        axis, splits = ctx.saved
        return tuple(np.split(g, splits, axis=axis))

    @staticmethod
    def sample(rng):
        return [_normal(rng, 3, 2), _normal(rng, 3, 4), _normal(rng, 3, 1)], {"axis": 1}


@register
class Index(Function):
    """``a[index]`` with basic or integer-array indexing along leading axes."""

    name = "index"

    @staticmethod
    def forward(ctx, a, index=None):
        ctx.save(a.shape, index)
        return a[index]

    @staticmethod
    def backward(ctx, g):
        shape, index = ctx.saved
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, index, g)
        return (out,)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 6, 3)], {"index": np.array([0, 2, 2, 5, 1])}


# -- linear algebra -----------------------------------------------------------------


@register
class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul: operands must be at least 2-D")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
        ctx.save(a, b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if ctx.needs[0] else None
        gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if ctx.needs[1] else None
        return ga, gb

    @staticmethod
    def sample(rng):
        return [_normal(rng, 5, 3, 4), _normal(rng, 4, 2)], {}


@register
class Affine(Function):
    """Dense layer ``x @ W + b``."""

    name = "affine"

    @staticmethod
    def forward(ctx, x, w, b):
        if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"affine: incompatible shapes x{x.shape} W{w.shape} b{b.shape}")
        ctx.save(x, w)
        return x @ w + b

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ w.T) if ctx.needs[0] else None
        gw = (x.reshape(-1, x.shape[-1]).T @ g2) if ctx.needs[1] else None
        gb = g2.sum(axis=0) if ctx.needs[2] else None
        return gx, gw, gb

    @staticmethod
    def sample(rng):
        return [_normal(rng, 6, 4), _normal(rng, 4, 3), _normal(rng, 3)], {}


# -- rotations ---------------------------------------------------------------------


def _skew(v):
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    return np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(v.shape[:-1] + (3, 3))


def _vee(m):
    return np.stack([m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], axis=-1)


def _rodrigues_coeffs(theta):
    small = theta < 1e-2
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(t)) / t**2)
    ca = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840, (t * np.cos(t) - np.sin(t)) / t**3)
    cb = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720, (t * np.sin(t) - 2 * (1 - np.cos(t))) / t**4)
    return a, b, ca, cb


@register
class AxisAngleToMatrix(Function):
    """Rotation vector (..., 3) -> rotation matrix (..., 3, 3)."""

    name = "axis_angle_to_matrix"

    @staticmethod
    def forward(ctx, w):
        if w.shape[-1] != 3:
            raise ShapeError("axis_angle_to_matrix: last dimension must be 3")
        theta = np.linalg.norm(w, axis=-1)
        a, b, ca, cb = _rodrigues_coeffs(theta)
        k = _skew(w)
        k2 = k @ k
        ctx.save(w, k, k2, a, b, ca, cb)
        return np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2

    @staticmethod
    def backward(ctx, g):
        w, k, k2, a, b, ca, cb = ctx.saved
        s1 = np.sum(g * k, axis=(-1, -2))
        s2 = np.sum(g * k2, axis=(-1, -2))
        kt = np.swapaxes(k, -1, -2)
        grad = (
            (ca * s1 + cb * s2)[..., None] * w
            + a[..., None] * _vee(g)
            + b[..., None] * _vee(g @ kt + kt @ g)
        )
        return (grad,)

    @staticmethod
    def sample(rng):
        w = _normal(rng, 6, 3)
        w[0] *= 1e-3  # exercise the series branch
        w[1] = 0.0
        return [w], {}


@register
class QuatNormalize(Function):
    name = "quat_normalize"

    @staticmethod
    def forward(ctx, q):
        n = np.linalg.norm(q, axis=-1, keepdims=True)
        out = q / n
        ctx.save(out, n)
        return out

    @staticmethod
    def backward(ctx, g):
        out, n = ctx.saved
        return ((g - out * np.sum(out * g, axis=-1, keepdims=True)) / n,)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 5, 4)], {}


@register
class QuatToMatrix(Function):
    """Unit quaternion ``(w, x, y, z)`` -> rotation matrix; no normalisation inside."""

    name = "quat_to_matrix"

    @staticmethod
    def forward(ctx, q):
        if q.shape[-1] != 4:
            raise ShapeError("quat_to_matrix: last dimension must be 4")
        ctx.save(q)
        w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
        m = np.stack(
            [
                1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
            ],
            axis=-1,
        )
        return m.reshape(q.shape[:-1] + (3, 3))

    @staticmethod
    def backward(ctx, g):
        (q,) = ctx.saved
        w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
        g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
        g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
        g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
        gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
        gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
        gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
        gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
        return (np.stack([gw, gx, gy, gz], axis=-1),)

    @staticmethod
    def sample(rng):
        q = _normal(rng, 4, 4)
        return [q / np.linalg.norm(q, axis=-1, keepdims=True)], {}


def _left_matrix(p):
    w, x, y, z = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    return np.stack([w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w], axis=-1).reshape(p.shape[:-1] + (4, 4))


def _right_matrix(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w], axis=-1).reshape(q.shape[:-1] + (4, 4))


@register
class QuatMul(Function):
    """Hamilton product ``p * q``."""

    name = "quat_mul"

    @staticmethod
    def forward(ctx, p, q):
        shapes = (p.shape, q.shape)
        p, q = np.broadcast_arrays(p, q)
        ctx.save(p, q, shapes)
        return np.einsum("...ij,...j->...i", _left_matrix(p), q)

    @staticmethod
    def backward(ctx, g):
        p, q, (sp, sq) = ctx.saved
        gp = np.einsum("...ji,...j->...i", _right_matrix(q), g)
        gq = np.einsum("...ji,...j->...i", _left_matrix(p), g)
        return unbroadcast(gp, sp), unbroadcast(gq, sq)

    @staticmethod
    def sample(rng):
        return [_normal(rng, 3, 4), _normal(rng, 3, 4)], {}


# -- sampling and filtering ---------------------------------------------------------


@register
class GridSample(Function):
    """Bilinear lookup of a feature plane (R, R, C) at coords (N, 2) in [-1, 1].

    ``coords[:, 0]`` indexes the plane's second axis, ``coords[:, 1]`` its first;
    -1 and +1 land on the centres of the corner texels.
    """

    name = "grid_sample"

    @staticmethod
    def forward(ctx, plane, coords):
        res_y, res_x, c = plane.shape
        fx = np.clip((coords[:, 0] + 1.0) * 0.5 * (res_x - 1), 0.0, res_x - 1)
        fy = np.clip((coords[:, 1] + 1.0) * 0.5 * (res_y - 1), 0.0, res_y - 1)
        x0 = np.minimum(np.floor(fx).astype(np.int64), res_x - 2)
        y0 = np.minimum(np.floor(fy).astype(np.int64), res_y - 2)
        tx = (fx - x0)[:, None]
        ty = (fy - y0)[:, None]
        p00 = plane[y0, x0]
        p01 = plane[y0, x0 + 1]
        p10 = plane[y0 + 1, x0]
        p11 = plane[y0 + 1, x0 + 1]
        ctx.save(plane.shape, x0, y0, tx, ty, p00, p01, p10, p11)
        return (1 - ty) * ((1 - tx) * p00 + tx * p01) + ty * ((1 - tx) * p10 + tx * p11)

    @staticmethod
    def backward(ctx, g):
        shape, x0, y0, tx, ty, p00, p01, p10, p11 = ctx.saved
        res_y, res_x, c = shape
        gplane = None
        if ctx.needs[0]:
            base = (y0 * res_x + x0)[:, None] * c + np.arange(c)
            idx = np.concatenate([base, base + c, base + res_x * c, base + (res_x + 1) * c])
            wts = np.concatenate([g * (1 - tx) * (1 - ty), g * tx * (1 - ty), g * (1 - tx) * ty, g * tx * ty])
            gplane = np.bincount(idx.ravel(), weights=wts.ravel(), minlength=res_y * res_x * c).reshape(shape)
        gcoords = None
        if ctx.needs[1]:
            dfx = np.sum(g * ((1 - ty) * (p01 - p00) + ty * (p11 - p10)), axis=1) * 0.5 * (res_x - 1)
            dfy = np.sum(g * ((1 - tx) * (p10 - p00) + tx * (p11 - p01)), axis=1) * 0.5 * (res_y - 1)
            gcoords = np.stack([dfx, dfy], axis=1)
        return gplane, gcoords

    @staticmethod
    def sample(rng):
        return [_normal(rng, 5, 5, 3), rng.uniform(-0.95, 0.95, (7, 2))], {}


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


@register
class GaussianFilter(Function):
    """Separable Gaussian filter over the first two axes, 'valid' extent."""

    name = "gaussian_filter"

    @staticmethod
    def forward(ctx, img, size=11, sigma=1.5):
        if img.shape[0] < size or img.shape[1] < size:
            raise ShapeError(f"gaussian_filter: image {img.shape[:2]} smaller than window {size}")
        k = gaussian_window(size, sigma)
        ctx.save(k)
        out = np.tensordot(sliding_window_view(img, size, axis=0), k, axes=([-1], [0]))
        return np.tensordot(sliding_window_view(out, size, axis=1), k, axes=([-1], [0]))

    @staticmethod
    def backward(ctx, g):
        (k,) = ctx.saved
        size = len(k)
        pad = [(0, 0)] * g.ndim
        pad[1] = (size - 1, size - 1)
        g = np.tensordot(sliding_window_view(np.pad(g, pad), size, axis=1), k[::-1], axes=([-1], [0]))
        pad[1] = (0, 0)
        pad[0] = (size - 1, size - 1)
        g = np.tensordot(sliding_window_view(np.pad(g, pad), size, axis=0), k[::-1], axes=([-1], [0]))
        return (g,)

    @staticmethod
    def sample(rng):
        return [rng.uniform(0, 1, (13, 14, 2))], {"size": 5, "sigma": 1.5}


# -- functional wrappers ------------------------------------------------------------

add = Add.apply
sub = Sub.apply
mul = Mul.apply
div = Div.apply
neg = Neg.apply
exp = Exp.apply
log = Log.apply
sin = Sin.apply
cos = Cos.apply
abs = Abs.apply  # noqa: A001
square = Square.apply
sqrt = Sqrt.apply
sigmoid = Sigmoid.apply
matmul = MatMul.apply
affine = Affine.apply
axis_angle_to_matrix = AxisAngleToMatrix.apply
quat_normalize = QuatNormalize.apply
quat_to_matrix = QuatToMatrix.apply
quat_mul = QuatMul.apply
grid_sample = GridSample.apply


def softplus(x, beta: float = 1.0) -> Tensor:
    return Softplus.apply(x, beta=beta)


def clip(x, lo: float, hi: float) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def swapaxes(x, a: int = -1, b: int = -2) -> Tensor:
    nd = np.ndim(x.data if isinstance(x, Tensor) else x)
    axes = list(range(nd))
    axes[a], axes[b] = axes[b], axes[a]
    return Transpose.apply(x, axes=tuple(axes))


def concat(tensors, axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def index(x, idx) -> Tensor:
    return Index.apply(x, index=idx)


def gaussian_filter(x, size: int = 11, sigma: float = 1.5) -> Tensor:
    return GaussianFilter.apply(x, size=size, sigma=sigma)
