"""Compare the numba superpixel kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from ALPNET_DISABLE_NUMBA.

    python3 benchmarks/bench_kernels.py [--sizes 64 128 256] [--repeats 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def worker(sizes, repeats):
    import numpy as np

    from ssl_alpnet import _accel
    from ssl_alpnet.superpixel import SuperpixelConfig, segment_slice

    rng = np.random.default_rng(0)
    cfg = SuperpixelConfig()
    segment_slice(rng.random((16, 16)), cfg)  # warm-up / JIT compile
    out = {"numba": _accel.NUMBA_ENABLED, "timings": {}, "labels": {}}
    for size in sizes:
        img = rng.random((size, size))
        img[size // 4: size // 2, size // 4: 3 * size // 4] += 1.0
        img /= img.max()
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            labels = segment_slice(img, cfg)
            best = min(best, time.perf_counter() - t0)
        out["timings"][str(size)] = best
        out["labels"][str(size)] = int(labels.max()) + 1
    print(json.dumps(out))


def run_backend(disable, sizes, repeats):
    env = dict(os.environ, ALPNET_DISABLE_NUMBA="1" if disable else "0")
    cmd = [sys.executable, __file__, "--worker", "--repeats", str(repeats), "--sizes", *map(str, sizes)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args()
    if args.worker:
        worker(args.sizes, args.repeats)
        return
    fast = run_backend(False, args.sizes, args.repeats)
    slow = run_backend(True, args.sizes, args.repeats)
    if not fast["numba"]:
        print("warning: numba unavailable, both runs used the fallback")
    print(f"{'size':>6} {'numba s':>10} {'numpy s':>10} {'speedup':>8} {'segments':>9}")
    for size in map(str, args.sizes):
        a, b = fast["timings"][size], slow["timings"][size]
        same = fast["labels"][size] == slow["labels"][size]
        print(f"{size:>6} {a:>10.4f} {b:>10.4f} {b / a:>7.1f}x {fast['labels'][size]:>9}{'' if same else ' MISMATCH'}")


if __name__ == "__main__":
    main()
