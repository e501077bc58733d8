"""Compare the compiled inner-loop kernel with the numpy fallback.

    python benchmarks/bench_kernels.py [--steps 20000] [--dims 2 10 50] [--repeat 5]

Prints the best-of-``repeat`` time per call, the speedup and the largest
difference between the two final iterates.
"""
import argparse
import timeit

import numpy as np

from dpbilevel.kernels import _fallback

try:
    from dpbilevel.kernels import _affine
except ImportError:
    _affine = None


def make_case(d: int, steps: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((d, d))
    H = np.ascontiguousarray(Q @ Q.T / d + np.eye(d))
    drive = np.ascontiguousarray(rng.standard_normal((steps, d)))
    etas = 1.0 / (np.arange(steps) + 1.0)
    return H, drive, etas


def run(fn, d, H, drive, etas):
    y = np.zeros(d)
    acc, work = np.zeros(d), np.zeros(d)
    fn(y, np.zeros(d), 5.0, H, drive, etas, acc, work)
    return y


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--dims", type=int, nargs="+", default=[2, 10, 50])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _affine is None:
        print("compiled kernel not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'d':>4} {'steps':>7} {'cython [ms]':>12} {'python [ms]':>12} {'speedup':>8} {'max |diff|':>11}")
    for d in args.dims:
        H, drive, etas = make_case(d, args.steps)
        fast = min(timeit.repeat(lambda: run(_affine.affine_round, d, H, drive, etas), number=1, repeat=args.repeat))
        slow = min(timeit.repeat(lambda: run(_fallback.affine_round, d, H, drive, etas), number=1,
                                 repeat=args.repeat))
        diff = float(np.max(np.abs(run(_affine.affine_round, d, H, drive, etas)
                                   - run(_fallback.affine_round, d, H, drive, etas))))
        print(f"{d:>4} {args.steps:>7} {1e3 * fast:>12.2f} {1e3 * slow:>12.2f} {slow / fast:>8.1f} {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
