"""Image metrics, evaluation reports and the prior-mode ablation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff.tape import ShapeError
from .dataset import Dataset
from .field import PRIOR_MODES
from .losses import SSIM_WINDOW, ssim_map

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SETTING_TAGS = {"train": 0, "setting1": 1, "setting2": 2}


def _check(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"image shapes {pred.shape} and {gt.shape} differ")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[:2]:
            raise ShapeError(f"mask shape {mask.shape} does not match image {pred.shape[:2]}")
        if not mask.any():
            raise ValueError("mask selects no pixels")
    return pred, gt, mask


def psnr(pred, gt, mask=None) -> float:
    """10 log10(1 / MSE) for [0, 1] images; the MSE runs over masked pixels if a mask is given."""
    pred, gt, mask = _check(pred, gt, mask)
    sq = (pred - gt) ** 2
    mse = float(sq[mask].mean() if mask is not None else sq.mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred, gt, mask=None) -> float:
    """Mean SSIM over the window-valid region; with a mask, over the masked valid pixels."""
    pred, gt, mask = _check(pred, gt, mask)
    smap = ssim_map(pred, gt).data.mean(axis=-1)
    if mask is None:
        return float(smap.mean())
    r = SSIM_WINDOW // 2
    inner = mask[r:mask.shape[0] - r, r:mask.shape[1] - r]
    if not inner.any():
        raise ValueError("mask selects no pixels inside the SSIM valid region")
    return float(smap[inner].mean())


@dataclass
class FrameScore:
    index: int
    psnr: float
    ssim: float
    psnr_masked: float | None = None
    ssim_masked: float | None = None


@dataclass
class EvalReport:
    setting: int
    split: str
    prior: str
    frames: list[FrameScore] = field(default_factory=list)
    iterations: int | None = None
    failure: str | None = None
    # reserved for perceptual metrics computed by external tooling
    lpips: float | None = None
    dists: float | None = None

    def aggregate(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for key in ("psnr", "ssim", "psnr_masked", "ssim_masked"):
            vals = [getattr(f, key) for f in self.frames if getattr(f, key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = self.aggregate()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = {k: v for k, v in d.items() if k != "aggregate"}
        d["frames"] = [FrameScore(**f) for f in d.get("frames", [])]
        return cls(**d)


def evaluate(model, dataset: Dataset, split: str = "setting1", prior: str | None = None,
             iterations: int | None = None) -> EvalReport:
    """Render every frame of ``split`` (no per-frame offsets) and score it."""
    if split not in SETTING_TAGS:
        raise ValueError(f"unknown split {split!r}")
    frames = dataset.split(split)
    if not frames:
        raise ValueError(f"dataset has no {split} frames")
    prior = prior or model.field.config.prior_mode
    report = EvalReport(SETTING_TAGS[split], split, prior, iterations=iterations)
    for fr in frames:
        img = model.render_frame(fr)
        score = FrameScore(fr.frame_index, psnr(img, fr.image), ssim(img, fr.image))
        if fr.mask is not None and fr.mask.any():
            score.psnr_masked = psnr(img, fr.image, fr.mask)
            score.ssim_masked = ssim(img, fr.image, fr.mask)
        report.frames.append(score)
    return report


def ablation_run(dataset: Dataset, config, modes=PRIOR_MODES, split: str = "setting1",
                 log_dir=None) -> dict[str, EvalReport]:
    """Train one model per prior mode with the same seed and settings, then evaluate each."""
    from .trainer import TrainingError, train

    if not dataset.split(split):
        raise ValueError(f"ablation needs {split} frames")
    reports = {}
    for mode in modes:
        cfg = replace(config, prior_mode=mode)
        stream = open(f"{log_dir}/train_{mode}.jsonl", "w") if log_dir else None
        try:
            state = train(dataset, cfg, log_stream=stream)
            reports[mode] = evaluate(state.model, dataset, split, mode, state.iteration)
        except TrainingError as exc:
            log.error("training with prior=%s aborted: %s", mode, exc)
            reports[mode] = EvalReport(SETTING_TAGS[split], split, mode, iterations=exc.iteration,
                                       failure=str(exc))
        finally:
            if stream is not None:
                stream.close()
    return reports


def comparison_table(reports: dict[str, EvalReport]) -> str:
    lines = [f"{'prior':<10} {'PSNR':>8} {'SSIM':>7} {'PSNR(m)':>8} {'SSIM(m)':>8}"]

    def fmt(x, w, p):
        return f"{x:>{w}.{p}f}" if x is not None else f"{'-':>{w}}"

    for mode, rep in reports.items():
        if rep.failure:
            lines.append(f"{mode:<10} failed: {rep.failure}")
            continue
        a = rep.aggregate()
        lines.append(f"{mode:<10} {fmt(a['psnr'], 8, 2)} {fmt(a['ssim'], 7, 4)} "
                     f"{fmt(a['psnr_masked'], 8, 2)} {fmt(a['ssim_masked'], 8, 4)}")
    return "\n".join(lines)
