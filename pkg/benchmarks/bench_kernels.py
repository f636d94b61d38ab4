"""Time the compiled chain kernels against their pure-Python bodies.

    python benchmarks/bench_kernels.py [--steps N] [--repeat R]

With ``MLMCMC_DISABLE_NUMBA=1`` only the Python path is timed. Results are
checked for bitwise equality before timing.
"""
import argparse
import time

import numpy as np

from mlmcmc import _kernels
from mlmcmc._accel import NUMBA_ENABLED, python_impl


def _inputs(steps, rng):
    d, reps, n = 2, 16, 64
    return {
        "imh_scan": (rng.standard_normal(steps + 1), np.log(rng.random(steps)), 0),
        "rwm_scan": (np.array([0.0, 0.0, 1.0, 1.0]), np.zeros(d), 2.4 / np.sqrt(d),
                     rng.standard_normal((steps, d)), np.log(rng.random(steps))),
        "grid_coupled_scan": (np.zeros(reps, np.int64), np.zeros(reps, np.int64),
                              rng.standard_normal(n), rng.standard_normal(n),
                              rng.integers(0, n, (steps // reps, reps)),
                              np.log(rng.random((steps // reps, reps))),
                              rng.standard_normal(n), rng.standard_normal(n)),
    }


def _call(name, fn, args, compiled):
    if name == "rwm_scan":
        logw = _kernels.gaussian_logw if compiled else python_impl(_kernels.gaussian_logw)
        return fn(logw, *args)
    return fn(*args)


def _best(name, fn, args, compiled, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        _call(name, fn, args, compiled)
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"numba enabled: {NUMBA_ENABLED}; steps={args.steps}")
    print(f"{'kernel':<20}{'python [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for name, inputs in _inputs(args.steps, rng).items():
        kernel = getattr(_kernels, name)
        py = python_impl(kernel)
        t_py = _best(name, py, inputs, False, args.repeat)
        if NUMBA_ENABLED:
            ref = _call(name, py, inputs, False)
            out = _call(name, kernel, inputs, True)  # also triggers compilation
            if not _same(ref, out):
                raise SystemExit(f"{name}: compiled and Python results differ")
            t_jit = _best(name, kernel, inputs, True, args.repeat)
            print(f"{name:<20}{t_py:>12.4f}{t_jit:>12.4f}{t_py / t_jit:>10.1f}")
        else:
            print(f"{name:<20}{t_py:>12.4f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
