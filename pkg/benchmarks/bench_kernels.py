"""Time the compiled smoothed-score kernel against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--sizes 100 300 1000] [--repeat 5]

Prints the best-of-``repeat`` wall time for one score-plus-Jacobian
evaluation at each sample size and checks that both backends agree.
"""

import argparse
import timeit

import numpy as np

from aftgof import _pykernels
from aftgof.data import SurvivalDataset
from aftgof.estimate import pair_inverse_scale

try:
    from aftgof import _ckernels
except ImportError:
    _ckernels = None


def make_inputs(n: int, p: int = 2, seed: int = 0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, p))
    t = np.exp(rng.normal(size=n) - z.sum(axis=1))
    status = (rng.random(n) > 0.25).astype(float)
    data = SurvivalDataset(t, status, z)
    e = data.log_time + z @ np.ones(p)
    return e, z, pair_inverse_scale(data), status * rng.exponential(size=n)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 300, 1000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = {"python": _pykernels.smoothed_score_jac}
    if _ckernels is not None:
        backends["cython"] = _ckernels.smoothed_score_jac
    else:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'n':>6} " + " ".join(f"{b:>12}" for b in backends) + "     speedup")
    for n in args.sizes:
        inputs = make_inputs(n)
        times = {}
        results = {}
        for name, fn in backends.items():
            results[name] = fn(*inputs, True)
            times[name] = min(timeit.repeat(lambda: fn(*inputs, True), number=1, repeat=args.repeat))
        if "cython" in results:
            for a, b in zip(results["python"], results["cython"]):
                np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{n:>6} " + " ".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends) + f"  {speed:>9.1f}x")


if __name__ == "__main__":
    main()
