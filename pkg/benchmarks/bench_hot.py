"""Time the hot loops under the numba and numpy backends.

    python3 benchmarks/bench_hot.py [--T 22500] [--n 128] [--repeat 5]

Both backends see the same inputs; the script checks that they agree before
reporting the best-of-``repeat`` wall time and the speedup.
"""

import argparse
import time

import numpy as np

from cgsysid import _hot
from cgsysid import filament as F
from cgsysid import kernels as K
from cgsysid import signals as S
from cgsysid import volterra as V


def best_time(fn, repeat):
    fn()  # warm-up, includes JIT compilation on the first numba call
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(T, n):
    spec = K.KernelSpec("hierarchical", 2, n, 1, 2)
    rng = np.random.default_rng(0)
    theta = rng.normal(size=K.param_count(spec))
    x = S.excitation(T + n - 1, seed=0)
    wt = np.ascontiguousarray(V.windows(x.samples, n).T[None])
    weights = rng.normal(size=T)
    return {
        "hier_forward": lambda: K.contract(spec, theta, wt, lag_major=True),
        "hier_backward": lambda: K.contract_grad(spec, theta, wt, weights, lag_major=True),
        "rk4_zoh": lambda: F.simulate(x).temperature.samples,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=22_500, help="time samples")
    ap.add_argument("--n", type=int, default=128, help="kernel memory")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _hot.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<14}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, fn in cases(args.T, args.n).items():
        res = {}
        for backend in ("numpy", "numba"):
            with _hot.use_backend(backend):
                res[backend] = (best_time(fn, args.repeat), fn())
        a, b = res["numpy"][1], res["numba"][1]
        assert np.allclose(a, b, rtol=1e-9, atol=1e-12 * np.max(np.abs(a))), name
        tn, tb = res["numpy"][0], res["numba"][0]
        print(f"{name:<14}{1e3 * tn:12.2f}{1e3 * tb:12.2f}{tn / tb:10.1f}x")


if __name__ == "__main__":
    main()
