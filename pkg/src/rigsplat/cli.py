"""Command-line entry point: ``rigsplat <command> [flags]``.

Failures print one JSON object on standard error (``{"error": ..., "message": ...}``)
and exit non-zero; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .field import PRIOR_MODES
from .losses import LossWeights  # noqa: F401  (re-exported for config files)

USAGE_EXIT = 2
ERROR_EXIT = 1


class UsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        size = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    if min(size) < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return size


def parse_vector(text: str, n: int, what: str) -> np.ndarray:
    """``zeros``, a comma-separated list, or a JSON array."""
    if text == "zeros":
        return np.zeros(n)
    try:
        values = json.loads(text) if text.strip().startswith("[") else [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse --{what} {text!r}") from None
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (n,):
        raise UsageError(f"--{what} needs {n} values, got {arr.size}")
    return arr


def _write_image(path: Path, image: np.ndarray) -> None:
    from .images import write_float_image, write_png

    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".f32":
        write_float_image(path, image)
    else:
        write_png(path, image, srgb=False)


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> dict:
    from .synth import SynthConfig, generate

    w, h = args.size
    cfg = SynthConfig(seed=args.seed, width=w, height=h, n_train=args.train_frames,
                      n_setting1=args.heldout, n_setting2=args.heldout)
    out = generate(cfg, args.out)
    return {"dataset": str(out), "frames": cfg.n_train + cfg.n_setting1 + cfg.n_setting2}


def desk_config(iters: int, seed: int, prior: str):
    """Training configuration whose densification window is the first quarter of the run."""
    from .trainer import TrainConfig

    return TrainConfig(iterations=iters, densify_until=iters // 4, seed=seed, prior_mode=prior)


def cmd_train(args) -> dict:
    from .dataset import load_dataset
    from .trainer import save_checkpoint, train

    ds = load_dataset(args.data)
    cfg = desk_config(args.iters, args.seed, args.prior)
    log_path = Path(args.log) if args.log else Path(str(args.out).rstrip("/") + ".log.jsonl")
    with open(log_path, "w") as fh:
        state = train(ds, cfg, log_stream=fh)
    save_checkpoint(args.out, state)
    return {"checkpoint": str(args.out), "iterations": state.iteration, "n_gaussians": len(state.model),
            "prior": cfg.prior_mode, "log": str(log_path)}


def _camera(model, index: int):
    if not 0 <= index < len(model.cameras):
        raise UsageError(f"--camera {index} out of range (checkpoint has {len(model.cameras)} cameras)")
    return model.cameras[index]


def cmd_render(args) -> dict:
    from .trainer import load_checkpoint

    model = load_checkpoint(args.ckpt).model
    exp = parse_vector(args.exp, model.mesh.n_expressions, "exp")
    pose = parse_vector(args.pose, 4, "pose")
    image = model.render(exp, pose, _camera(model, args.camera))
    _write_image(Path(args.out), image)
    return {"image": str(args.out)}


def cmd_reanimate(args) -> dict:
    from .trainer import load_checkpoint, parse_drive, reanimate

    model = load_checkpoint(args.ckpt).model
    try:
        entries = json.loads(Path(args.drive).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"drive file {args.drive} is not valid JSON: {exc}") from None
    if not isinstance(entries, list):
        raise UsageError("drive file must hold a JSON array")
    drive = parse_drive(entries, model.cameras, model.mesh.n_expressions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(reanimate(model, drive)):
        _write_image(out / f"{i:05d}.png", img)
        if args.float:
            _write_image(out / f"{i:05d}.f32", img)
    return {"frames": len(drive), "out": str(out)}


def cmd_eval(args) -> dict:
    from .dataset import load_dataset
    from .metrics import evaluate
    from .trainer import load_checkpoint

    state = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    report = evaluate(state.model, ds, args.split, iterations=state.iteration)
    if args.masked and any(f.psnr_masked is None for f in report.frames):
        raise UsageError(f"--masked needs head masks for every {args.split} frame")
    d = report.to_dict()
    d["masked"] = bool(args.masked)
    d["headline_psnr"] = d["aggregate"]["psnr_masked" if args.masked else "psnr"]
    if args.out:
        Path(args.out).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    return d


def cmd_ablate(args) -> dict:
    from .dataset import load_dataset
    from .metrics import ablation_run, comparison_table

    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = desk_config(args.iters, args.seed, "learnable")
    reports = ablation_run(ds, cfg, split=args.split, log_dir=out)
    table = comparison_table(reports)
    (out / "table.txt").write_text(table + "\n")
    summary = {m: r.to_dict() for m, r in reports.items()}
    (out / "reports.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    sys.stderr.write(table + "\n")
    key = "psnr_masked" if args.masked else "psnr"
    return {"out": str(out), key: {m: r.aggregate()[key] for m, r in reports.items()}}


def cmd_gradcheck(args) -> dict:
    from .autodiff.gradcheck import REL_TOL, run_gate

    results = run_gate(instances=args.instances, seed=args.seed)
    for r in results:
        print(json.dumps({"op": r.op, "instances": r.instances, "max_rel_error": r.max_rel_error,
                          "passed": r.passed}))
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise GateFailure(f"ops over tolerance {REL_TOL}: {', '.join(failed)}")
    return {"ops": len(results), "passed": True}


class GateFailure(Exception):
    pass


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = JsonArgumentParser(prog="rigsplat", description="Riggable Gaussian splatting on CPU.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=parse_size, default=(64, 64))
    s.add_argument("--train-frames", type=int, default=200)
    s.add_argument("--heldout", type=int, default=20, help="frames per held-out setting")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--prior", choices=PRIOR_MODES, default="learnable")
    s.add_argument("--iters", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log", help="training log (JSON lines); defaults next to the checkpoint")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render one configuration from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help=".png (8-bit linear) or .f32 (float dump)")
    s.add_argument("--exp", default="zeros")
    s.add_argument("--pose", default="zeros")
    s.add_argument("--camera", type=int, default=0)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("reanimate", help="render a drive sequence")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--drive", required=True)
    s.add_argument("--out", required=True, help="output directory for numbered frames")
    s.add_argument("--float", action="store_true", help="also write float dumps")
    s.set_defaults(fn=cmd_reanimate)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "setting1", "setting2"), default="setting1")
    s.add_argument("--masked", action="store_true", help="head-masked metrics as the headline")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare the three prior modes")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", choices=("setting1", "setting2"), default="setting1")
    s.add_argument("--masked", action="store_true")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gate over every registered op")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return USAGE_EXIT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        result = args.fn(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return USAGE_EXIT
    except GateFailure as exc:
        _emit_error("gradcheck", str(exc))
        return ERROR_EXIT
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        _emit_error(type(exc).__name__, str(exc).replace("\n", " "))
        return ERROR_EXIT
    if result is not None and args.command != "gradcheck":
        print(json.dumps(result, sort_keys=True))
    elif result is not None:
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
