"""Adam with per-group geometric learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tape import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    lr_start: float
    lr_end: float
    decay_steps: int

    @classmethod
    def constant(cls, lr: float) -> "Schedule":
        return cls(lr, lr, 1)

    def to_dict(self) -> dict:
        return {"lr_start": self.lr_start, "lr_end": self.lr_end, "decay_steps": self.decay_steps}


def lr_at(schedule: Schedule, step: int) -> float:
    """Geometric interpolation from ``lr_start`` to ``lr_end``, then held at ``lr_end``."""
    if schedule.lr_start == schedule.lr_end:
        return schedule.lr_start
    frac = min(max(step, 0), schedule.decay_steps) / schedule.decay_steps
    return schedule.lr_start * (schedule.lr_end / schedule.lr_start) ** frac


def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Pure bias-corrected Adam update; ``step`` counts from 1.

    Returns ``(new_param, new_m, new_v)`` in float64.
    """
    grad = np.asarray(grad, dtype=np.float64)
    m = beta1 * np.asarray(m, dtype=np.float64) + (1.0 - beta1) * grad
    v = beta2 * np.asarray(v, dtype=np.float64) + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return np.asarray(param, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    schedule: Schedule
    post_step: Callable[[Tensor], None] | None = None


@dataclass
class Adam:
    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    rejected: int = 0

    def params(self) -> dict[str, Tensor]:
        out = {}
        for g in self.groups:
            out.update(g.params)
        return out

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None

    def learning_rates(self) -> dict[str, float]:
        return {g.name: lr_at(g.schedule, self.step_count) for g in self.groups}

    def step(self) -> None:
        """One bias-corrected Adam update using each parameter's ``.grad``."""
        lrs = self.learning_rates()
        self.step_count += 1
        for group in self.groups:
            lr = lrs[group.name]
            for name, p in group.params.items():
                if p.grad is None:
                    continue
                g = np.asarray(p.grad, dtype=np.float64)
                if not np.all(np.isfinite(g)):
                    self.rejected += 1
                    log.warning("non-finite gradient for %s; update skipped (%d so far)", name, self.rejected)
                    continue
                m, v = self.moments.get(name, (None, None))
                if m is None:
                    m = np.zeros(p.shape, dtype=p.data.dtype)
                    v = np.zeros(p.shape, dtype=p.data.dtype)
                new, m64, v64 = adam_step(p.data, g, m, v, self.step_count, lr, self.beta1, self.beta2, self.eps)
                p.data = new.astype(p.data.dtype)
                self.moments[name] = (m64.astype(p.data.dtype), v64.astype(p.data.dtype))
            if group.post_step is not None:
                for p in group.params.values():
                    group.post_step(p)

    def remap_rows(self, name: str, source_rows: np.ndarray) -> None:
        """Reindex the moments of a per-Gaussian parameter after densification.

        ``source_rows[i]`` is the old row feeding new row ``i``, or -1 for a fresh row.
        """
        if name not in self.moments:
            return
        source_rows = np.asarray(source_rows)
        fresh = source_rows < 0
        out = []
        for arr in self.moments[name]:
            new = arr[np.where(fresh, 0, source_rows)].copy()
            new[fresh] = 0
            out.append(new)
        self.moments[name] = tuple(out)
