"""Compare the compiled and numpy kernel backends on frame rendering and splatting.

    python benchmarks/bench_kernels.py [--sizes 16,32,64] [--repeat 5]

Prints one row per (kernel, size, backend) with the median wall time per call,
and checks both backends agree bit for bit on the benchmarked inputs.
"""
import argparse
import statistics
import time

import numpy as np

from warphist import _kernels
from warphist.camera import Intrinsics, make_primitive_trajectory
from warphist.synth import generate_scene, render
from warphist.warp import forward_splat, unproject


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def bench(sizes, repeat):
    rows = []
    scene = generate_scene(11)
    for size in sizes:
        K = Intrinsics.from_fov(size, size)
        traj = make_primitive_trajectory("pan_right", 2, 8.0, K)
        frame, depth = render(scene, traj[0], K)[:2]
        pts = unproject(frame, depth, K, traj[0])
        outputs = {}
        for backend in _kernels.available_backends():
            _kernels.use_backend(backend)
            jobs = {
                "render": lambda: render(scene, traj[1], K),
                "splat": lambda: forward_splat(pts, traj[1], K),
            }
            for name, fn in jobs.items():
                out = fn()
                outputs.setdefault(name, []).append(out)
                rows.append((name, size, backend, _median_time(fn, repeat)))
        for name, outs in outputs.items():
            a, b = (outs[0], outs[-1])
            arrays = zip(a, b) if isinstance(a, tuple) else [(a.rgb, b.rgb), (a.valid, b.valid)]
            for x, y in arrays:
                if isinstance(x, np.ndarray) and not np.array_equal(x, y):
                    raise SystemExit(f"backends disagree on {name} at {size}px")
    _kernels.use_backend("compiled" if "compiled" in _kernels.available_backends() else "python")
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="16,32,64")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rows = bench([int(s) for s in args.sizes.split(",")], args.repeat)
    base = {(n, s): t for n, s, b, t in rows if b == "python"}
    print(f"{'kernel':<8}{'size':>6}  {'backend':<10}{'ms/call':>10}{'speedup':>9}")
    for name, size, backend, t in rows:
        print(f"{name:<8}{size:>6}  {backend:<10}{1000 * t:>10.3f}{base[(name, size)] / t:>8.1f}x")


if __name__ == "__main__":
    main()
