#!/usr/bin/env python3
"""Time the rasterizer kernels: compiled extension vs the numpy fallback.

Both backends run the same forward and backward passes on the same random
scenes; the script also reports the largest image difference between them.

    python benchmarks/bench_raster.py --splats 1600 --size 64x64 --repeats 5
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from rigsplat import raster
from rigsplat.raster import available_backends, render, render_backward, set_backend
from rigsplat.raster.project import project_batch
from rigsplat.scene import Camera


def make_scene(rng, n: int, width: int, height: int):
    cam = Camera.look_at([0.0, 0.0, 5.5], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], fx=1.375 * width, fy=1.375 * width,
                         cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)
    pos = rng.uniform([-2.0, -1.5, -1.5], [2.0, 1.5, 1.5], (n, 3))
    a = rng.normal(size=(n, 3, 3)) * 0.06
    cov = a @ np.swapaxes(a, 1, 2) + 1e-4 * np.eye(3)
    col = rng.uniform(0, 1, (n, 3))
    op = rng.uniform(0.2, 0.95, n)
    return project_batch(pos, cov, cam, col, op), cam


def time_backend(name: str, scenes, repeats: int) -> dict:
    set_backend(name)
    fwd, bwd = [], []
    images = []
    for batch, cam in scenes:
        g = np.ones((cam.height, cam.width, 3)) / (cam.height * cam.width)
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = render(batch, cam)
            t1 = time.perf_counter()
            render_backward(g, out)
            t2 = time.perf_counter()
            fwd.append(t1 - t0)
            bwd.append(t2 - t1)
        images.append(out.image)
    return {"forward_ms": 1e3 * float(np.median(fwd)), "backward_ms": 1e3 * float(np.median(bwd)), "images": images}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splats", type=int, default=1600)
    ap.add_argument("--size", default="64x64")
    ap.add_argument("--scenes", type=int, default=3)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print one JSON object instead of a table")
    args = ap.parse_args(argv)
    w, h = (int(v) for v in args.size.lower().split("x"))
    rng = np.random.default_rng(args.seed)
    scenes = [make_scene(rng, args.splats, w, h) for _ in range(args.scenes)]
    previous = raster.BACKEND
    results = {}
    try:
        for name in available_backends():
            results[name] = time_backend(name, scenes, args.repeats)
    finally:
        set_backend(previous)
    diff = None
    if len(results) == 2:
        diff = max(float(np.abs(a - b).max()) for a, b in zip(results["python"]["images"],
                                                                results["compiled"]["images"]))
    summary = {name: {k: v for k, v in r.items() if k != "images"} for name, r in results.items()}
    if args.json:
        print(json.dumps({"splats": args.splats, "size": [w, h], "backends": summary, "max_abs_diff": diff}))
        return 0
    print(f"{args.splats} splats, {w}x{h}, median of {args.scenes}x{args.repeats} runs")
    print(f"{'backend':<10} {'forward ms':>11} {'backward ms':>12}")
    for name, r in summary.items():
        print(f"{name:<10} {r['forward_ms']:>11.2f} {r['backward_ms']:>12.2f}")
    if diff is not None:
        py, cc = summary["python"], summary["compiled"]
        speed = (py["forward_ms"] + py["backward_ms"]) / (cc["forward_ms"] + cc["backward_ms"])
        print(f"speed-up {speed:.1f}x, max |image difference| {diff:.2e}")
    else:
        print("compiled extension not built; only the fallback was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
