"""Central finite-difference gate for registered ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import OPS, Function, Tape, Tensor

REL_TOL = 1e-4


@dataclass
class GradcheckResult:
    op: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def numeric_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_function(fn: type[Function], inputs, kwargs, rng, h: float | None = None) -> float:
    """Max relative error over all inputs of ``fn`` for one random instance."""
    h = fn.fd_step if h is None else h
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn.apply(*tensors, **kwargs)
    weights = rng.standard_normal(out.shape)
    tape.backward(out, weights)
    worst = 0.0
    for i, x in enumerate(inputs):

        def f(xi, i=i):
            args = [xi if j == i else inputs[j] for j in range(len(inputs))]
            return float(np.sum(fn.apply(*args, **kwargs).data * weights))

        numeric = numeric_gradient(f, x, h)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(x)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_gate(instances: int = 20, seed: int = 0, names=None) -> list[GradcheckResult]:
    """Finite-difference check of every registered op on ``instances`` random inputs."""
    # importing these modules registers their ops
    from . import ops  # noqa: F401
    from .. import raster  # noqa: F401

    results = []
    for name in sorted(OPS) if names is None else names:
        fn = OPS[name]
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            inputs, kwargs = fn.sample(rng)
            worst = max(worst, check_function(fn, inputs, kwargs, rng))
        results.append(GradcheckResult(name, instances, worst))
    return results
