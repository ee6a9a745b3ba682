"""Benchmark the jitted conv kernels against the pure-numpy fallback.

Runs every kernel (forward, input-gradient, weight-gradient) over the
shapes the models actually use and prints a timing table.  Invoke with

    python benchmarks/bench_kernels.py [--repeats 7]

DEOCC_NO_NUMBA only controls which path the package USES; this script
always times both implementations directly.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from deocc import kernels

# (label, x shape, w shape, stride, pad) — drawn from the stage-1/stage-2 nets
SHAPES = [
    ("vae stem 8x(4->8)@64", (8, 4, 64, 64), (8, 4, 3, 3), 1, 1),
    ("vae trunk (8->16)s2@64", (1, 8, 64, 64), (16, 8, 3, 3), 2, 1),
    ("vae trunk (16->24)s2@32", (1, 16, 32, 32), (24, 16, 3, 3), 2, 1),
    ("vae dec (16->24)@16 K8", (8, 16, 16, 16), (24, 16, 3, 3), 1, 1),
    ("vae dec (24->16)@32 K8", (8, 24, 32, 32), (16, 24, 3, 3), 1, 1),
    ("vae dec (16->12)@64 K8", (8, 16, 64, 64), (12, 16, 3, 3), 1, 1),
    ("unet in (10->24)@16 B4", (4, 10, 16, 16), (24, 10, 3, 3), 1, 1),
    ("unet down (24->48)s2@16 B4", (4, 24, 16, 16), (48, 24, 3, 3), 2, 1),
    ("unet mid (48->48)@8 B4", (4, 48, 8, 8), (48, 48, 3, 3), 1, 1),
]


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times) * 1000.0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    np_fwd, np_bi, np_bw = kernels.numpy_kernels()
    nb = kernels.numba_kernels()
    if nb is None:
        print("numba unavailable (or disabled); nothing to compare")
        return
    nb_fwd, nb_bi, nb_bw = nb

    rng = np.random.default_rng(0)
    header = (f"{'shape':>28} | {'kernel':>10} | {'numba ms':>9} | "
              f"{'numpy ms':>9} | {'speedup':>7}")
    print(header)
    print("-" * len(header))
    totals = {"numba": 0.0, "numpy": 0.0}
    for label, xs, ws, stride, pad in SHAPES:
        x = rng.normal(size=xs)
        w = rng.normal(size=ws)
        b = np.zeros(ws[0])
        y = nb_fwd(x, w, b, stride, pad)  # warm the jit
        gy = rng.normal(size=y.shape)
        nb_bi(gy, w, stride, pad, xs[2], xs[3])
        nb_bw(gy, x, stride, pad, ws[2], ws[3])
        rows = [
            ("fwd", (nb_fwd, (x, w, b, stride, pad)), (np_fwd, (x, w, b, stride, pad))),
            ("bwd_in", (nb_bi, (gy, w, stride, pad, xs[2], xs[3])),
             (np_bi, (gy, w, stride, pad, xs[2], xs[3]))),
            ("bwd_wgt", (nb_bw, (gy, x, stride, pad, ws[2], ws[3])),
             (np_bw, (gy, x, stride, pad, ws[2], ws[3]))),
        ]
        for kind, (f_nb, a_nb), (f_np, a_np) in rows:
            t_nb = best_of(f_nb, a_nb, args.repeats)
            t_np = best_of(f_np, a_np, args.repeats)
            totals["numba"] += t_nb
            totals["numpy"] += t_np
            print(f"{label:>28} | {kind:>10} | {t_nb:>9.2f} | {t_np:>9.2f} | "
                  f"{t_np / t_nb:>6.2f}x")
    print("-" * len(header))
    print(f"{'TOTAL':>28} | {'':>10} | {totals['numba']:>9.2f} | "
          f"{totals['numpy']:>9.2f} | {totals['numpy'] / totals['numba']:>6.2f}x")
    print(f"\nactive package backend: {kernels.BACKEND}"
          f"  (set DEOCC_NO_NUMBA=1 to force the numpy path)")


if __name__ == "__main__":
    main()
