"""Photometric and regularisation terms and their weighted sum.

Every term is a mean over its index set, so the weights do not depend on image
size or Gaussian count. Inputs may be Tensors (recorded on the active tape) or
plain arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tape import ShapeError, Tensor

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class LossError(RuntimeError):
    """A loss term came out NaN or infinite."""

    def __init__(self, term: str, breakdown: dict):
        super().__init__(f"non-finite loss term {term!r}: {breakdown}")
        self.term = term
        self.breakdown = breakdown


def _shape(x) -> tuple:
    return x.shape if isinstance(x, (Tensor, np.ndarray)) else np.shape(x)


def _same_shape(a, b, what: str) -> None:
    if _shape(a) != _shape(b):
        raise ShapeError(f"{what}: shapes {_shape(a)} and {_shape(b)} differ")


def l1_loss(pred, gt) -> Tensor:
    _same_shape(pred, gt, "l1_loss")
    return ops.mean(ops.abs(ops.sub(pred, gt)))


def ssim_map(x, y, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """Per-pixel SSIM over the 'valid' region of an (H, W, C) image pair."""
    _same_shape(x, y, "ssim")
    h, w = _shape(x)[:2]
    if min(h, w) < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} SSIM window")

    def blur(t):
        return ops.gaussian_filter(t, size=size, sigma=sigma)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(ops.square(x)) - mu_xx
    var_y = blur(ops.square(y)) - mu_yy
    cov = blur(ops.mul(x, y)) - mu_xy
    num = (2.0 * mu_xy + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return num / den


def dssim_loss(pred, gt) -> Tensor:
    """``(1 - SSIM) / 2`` with SSIM averaged over pixels and channels."""
    return (1.0 - ops.mean(ssim_map(pred, gt))) * 0.5


def flame_match_loss(displacement_at_vertices, delta_v) -> Tensor:
    """Mean squared distance between the field's displacement at the canonical
    vertices and the mesh's own vertex displacement."""
    _same_shape(displacement_at_vertices, delta_v, "flame_match_loss")
    return ops.mean(ops.sum(ops.square(ops.sub(displacement_at_vertices, delta_v)), axis=-1))


def _zero() -> Tensor:
    return Tensor(np.array(0.0))


def far_field_losses(displacement, r_prime, s_raw, far) -> dict[str, Tensor]:
    """Keep far-from-mesh Gaussians still and every Gaussian's scale factor near 1.

    ``far`` is a boolean mask (N,) of Gaussians at mesh distance >= D. The scale
    term covers all Gaussians.
    """
    far_idx = np.flatnonzero(np.asarray(far, dtype=bool))
    if len(far_idx) == 0:
        log.info("far-field set is empty; displacement and rotation terms are 0")
        l_def = _zero()
        l_rot = _zero()
    else:
        d = ops.index(displacement, far_idx)
        l_def = ops.mean(ops.sum(ops.square(d), axis=-1))
        r = ops.index(r_prime, far_idx)
        l_rot = ops.mean(ops.sum(ops.square(r - np.eye(3)), axis=(-2, -1)))
    l_scale = ops.mean(ops.abs(ops.exp(s_raw) - 1.0))
    return {"global_def": l_def, "global_rot": l_rot, "global_scale": l_scale}


def small_term_losses(eta, t) -> dict[str, Tensor]:
    """Mean squared norm of the corrective offsets and squared norm of this frame's offset."""
    l_eta = _zero() if eta is None else ops.mean(ops.sum(ops.square(eta), axis=-1))
    l_t = _zero() if t is None else ops.sum(ops.square(t))
    return {"eta": l_eta, "t": l_t}


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 0.8
    w_dssim: float = 0.2
    lambda_flame: float = 1.0
    lambda_global_def: float = 1e-1
    lambda_eta: float = 1e-3
    lambda_t: float = 1e-3
    lambda_global_rot: float = 1e-1
    lambda_global_scale: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0")

    def by_term(self) -> dict[str, float]:
        return {
            "l1": self.w_l1,
            "dssim": self.w_dssim,
            "flame": self.lambda_flame,
            "global_def": self.lambda_global_def,
            "eta": self.lambda_eta,
            "t": self.lambda_t,
            "global_rot": self.lambda_global_rot,
            "global_scale": self.lambda_global_scale,
        }


TERMS = tuple(LossWeights().by_term())


def total_loss(terms: dict, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the named terms; returns the total and a float breakdown.

    Missing terms count as 0. Raises :class:`LossError` on a non-finite term.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    coeffs = weights.by_term()
    breakdown: dict[str, float] = {}
    total = None
    for name in TERMS:
        if name not in terms:
            breakdown[name] = 0.0
            continue
        value = terms[name]
        scalar = float(np.asarray(value.data if isinstance(value, Tensor) else value))
        breakdown[name] = scalar
        if not math.isfinite(scalar):
            raise LossError(name, breakdown)
        term = ops.mul(value, coeffs[name])
        total = term if total is None else total + term
    total = _zero() if total is None else total
    breakdown["total"] = float(total.data)
    return total, breakdown
