"""Compare the compiled and numpy conv3d backends.

    python benchmarks/bench_conv.py --channels 84 --size 32 --repeat 3
"""

import argparse
import time

import numpy as np

from eqtrack import _kernels
from eqtrack.harmonics import kernel_offsets


def ball_kernel(rng, co, ci, k):
    w = rng.standard_normal((co, ci, k, k, k))
    w[:, :, np.linalg.norm(kernel_offsets(k), axis=-1) > k // 2 + 0.5] = 0.0
    return w


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--channels", type=int, default=84)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--kernel", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    c, n, k = args.channels, args.size, args.kernel
    x = rng.standard_normal((c, n, n, n))
    w = ball_kernel(rng, c, c, k)
    g = rng.standard_normal((c, n, n, n))
    support = np.any(w != 0, axis=(0, 1))
    taps = int(support.sum())
    macs = c * c * taps * n ** 3

    print(f"conv3d {c}->{c} channels, {n}^3 grid, {k}^3 kernel ({taps} active taps)")
    print(f"{'backend':<8}{'op':<14}{'seconds':>10}{'GMAC/s':>10}")
    results = {}
    for backend in _kernels.available_backends():
        ops = {
            "forward": lambda: _kernels.conv3d(x, w, backend=backend),
            "input_grad": lambda: _kernels.conv3d_input_grad(g, w, backend=backend),
            "kernel_grad": lambda: _kernels.conv3d_kernel_grad(x, g, k, support, backend=backend),
        }
        for name, fn in ops.items():
            sec, out = best_of(fn, args.repeat)
            results[(backend, name)] = (sec, out)
            print(f"{backend:<8}{name:<14}{sec:>10.3f}{macs / sec / 1e9:>10.2f}")
    if len(_kernels.available_backends()) > 1:
        print()
        for name in ("forward", "input_grad", "kernel_grad"):
            (tn, a), (tp, b) = results[("native", name)], results[("numpy", name)]
            diff = np.abs(a - b).max() / np.abs(b).max()
            print(f"{name:<14} speedup {tp / tn:6.2f}x   max rel diff {diff:.1e}")


if __name__ == "__main__":
    main()
