"""Define-by-run reverse-mode differentiation over numpy arrays.

Ops are :class:`Function` subclasses. Calling ``Fn.apply(*inputs)`` evaluates the
forward pass and, when a :class:`Tape` is active and any input requires a
gradient, appends a record to it. ``Tape.backward`` walks the records in exact
reverse order and accumulates gradients additively into leaf ``.grad`` slots.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_producer", "__weakref__")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data) if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._producer: "Record | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Context:
    """Scratch space an op's forward leaves for its backward."""

    def __init__(self):
        self.saved: tuple = ()
        self.needs: tuple[bool, ...] = ()

    def save(self, *values) -> None:
        self.saved = values


class Record:
    __slots__ = ("fn", "ctx", "inputs", "output")

    def __init__(self, fn, ctx, inputs, output):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs
        self.output = output


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered op records for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if output.data.size != 1:
                raise ShapeError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(output.data, dtype=np.float64)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.fn.backward(rec.ctx, g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{rec.fn.name}: gradient shape {ig.shape} != input shape {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._producer is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                    # leaves never appear as record outputs; drop so they are not re-summed
                    grads.pop(key)
        # output itself may be a leaf
        if output._producer is None and output.requires_grad and id(output) in grads:
            g = grads[id(output)]
            output.grad = g.copy() if output.grad is None else output.grad + g

    def inputs_of_records(self) -> set[int]:
        """Ids of every tensor consumed by a recorded op (for graph inspection)."""
        return {id(t) for rec in self.records for t in rec.inputs}


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


OPS: dict[str, type["Function"]] = {}


class Function:
    """Base class for differentiable ops.

    Subclasses define ``forward(ctx, *arrays, **kwargs) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` with one entry (or None) per input.
    ``sample(rng)`` returns ``(inputs, kwargs)`` for the finite-difference gate.
    """

    name = "function"
    fd_step = 1e-6

    @staticmethod
    def forward(ctx, *args, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    sample: Callable | None = None

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context()
        ctx.needs = tuple(t.requires_grad for t in tensors)
        try:
            out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        except ValueError as exc:
            if isinstance(exc, ShapeError):
                raise
            raise ShapeError(f"{cls.name}: {exc}") from exc
        requires = any(ctx.needs)
        result = Tensor(out, requires_grad=requires)
        tape = active_tape()
        if requires and tape is not None:
            rec = Record(cls, ctx, tensors, result)
            result._producer = rec
            tape.records.append(rec)
        return result


def register(cls: type[Function]) -> type[Function]:
    if cls.name in OPS:
        raise ValueError(f"op {cls.name!r} already registered")
    OPS[cls.name] = cls
    return cls


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad
