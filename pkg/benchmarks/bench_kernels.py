"""Timing of the numba and numpy kernel backends on simulation-sized inputs.

Usage: ``python benchmarks/bench_kernels.py [--repeat 20]``. Each kernel is
run once per backend before timing, so numba compilation is excluded.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fedpriv import _kernels as K

CASES = {
    "sorted_observation_sums": lambda x, blk, mem, off: (x,),
    "clipped_observation_sums": lambda x, blk, mem, off: (x, 2.5),
    "max_leave_one_out_inner": lambda x, blk, mem, off: (blk,),
    "subset_norm_excess": lambda x, blk, mem, off: (blk, mem, off, 3.0),
}


def inputs(m: int, n: int, d: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, n, d))
    blk = np.ascontiguousarray(x[0])
    sizes = rng.integers(1, 6, size=200)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    members = rng.integers(0, n, size=offsets[-1]).astype(np.int64)
    return x, blk, members, offsets


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--shape", type=int, nargs=3, default=(10, 50, 30), metavar=("M", "N", "D"))
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed")
    data = inputs(*args.shape)
    print(f"shape (m, n, d) = {tuple(args.shape)}, best of {args.repeat}")
    print(f"{'kernel':28s} {'numpy [us]':>12s} {'numba [us]':>12s} {'speedup':>8s}")
    for name, make in CASES.items():
        call_args = make(*data)
        times = {}
        for backend in ("numpy", "numba"):
            fn = getattr(K, f"{name}_{backend}")
            fn(*call_args)
            times[backend] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
        print(f"{name:28s} {times['numpy'] * 1e6:12.1f} {times['numba'] * 1e6:12.1f} "
              f"{times['numpy'] / times['numba']:8.2f}")


if __name__ == "__main__":
    main()
