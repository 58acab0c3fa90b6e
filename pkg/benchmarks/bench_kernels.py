"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--points N]
"""

import argparse
import timeit

import numpy as np

from fullvel import kernels, sim
from fullvel.solver import solve_batch


def workloads(points: int):
    cfg = sim.random_scene_config(7, width=640, height=480, points_per_body=points)
    frame = sim.simulate_frame(cfg, 1)
    ego = sim.ego_state_for(cfg, cfg.time(1), cfg.time(0))
    h, w = frame.flow.valid.shape
    px = np.random.default_rng(0).uniform([0, 0], [w - 1, h - 1], size=(100_000, 2))
    args = (frame.positions(), frame.radial_speeds(), frame.raw_mask(), frame.flow, frame.intrinsics, ego,
            frame.radar_extrinsics)
    return {
        f"solve_batch ({len(frame.returns)} returns)": lambda: solve_batch(*args),
        "bilinear_flow (1e5 pixels)": lambda: kernels.bilinear_flow(frame.flow.vectors, frame.flow.valid, px),
        "render_frame (640x480)": lambda: sim.render_frame(cfg, cfg.time(1), cfg.time(0), 1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=2000, help="returns sampled per body")
    args = ap.parse_args(argv)
    backends = sorted(kernels.available_backends())
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    jobs = workloads(args.points)
    times = {}
    previous = kernels.BACKEND
    try:
        for b in backends:
            kernels.use_backend(b)
            for name, fn in jobs.items():
                fn()
                times[name, b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    finally:
        kernels.use_backend(previous)
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name in jobs:
        row = f"{name:32s}" + "".join(f"{times[name, b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{times[name, 'python'] / times[name, 'cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
