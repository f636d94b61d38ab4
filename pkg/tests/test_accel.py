"""The compiled kernels and their pure-Python bodies give identical results."""
import os
import subprocess
import sys

import numpy as np
import pytest

from mlmcmc import _kernels
from mlmcmc._accel import NUMBA_ENABLED, python_impl


def _both(fn):
    return fn, python_impl(fn)


def test_imh_scan_bitwise(rng):
    w = rng.normal(size=5001)
    log_u = np.log(rng.random(5000))
    jit, py = _both(_kernels.imh_scan)
    for a, b in zip(jit(w, log_u, 0), py(w, log_u, 0)):
        assert np.array_equal(a, b)


def test_rwm_scan_bitwise(rng):
    eps = rng.standard_normal((4000, 1))
    log_u = np.log(rng.random(4000))
    params = np.array([1.0, 0.5])
    jit, py = _both(_kernels.rwm_scan)
    x0 = np.array([0.3])
    a = jit(_kernels.gaussian_logw, params, x0, 1.0, eps, log_u)
    b = py(python_impl(_kernels.gaussian_logw), params, x0, 1.0, eps, log_u)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_grid_scan_bitwise(rng):
    n = 16
    w_c, w_f = rng.normal(size=n), rng.normal(size=n)
    props = rng.integers(0, n, size=(200, 3))
    log_u = np.log(rng.random((200, 3)))
    vals = np.linspace(-1, 1, n)
    jit, py = _both(_kernels.grid_coupled_scan)
    i0, j0 = np.zeros(3, np.int64), np.zeros(3, np.int64)
    a = jit(i0, j0, w_c, w_f, props, log_u, vals, vals)
    b = py(i0, j0, w_c, w_f, props, log_u, vals, vals)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


_SCRIPT = """
import hashlib
from mlmcmc.problems import shifting_gaussians
from mlmcmc.sampler import run_hierarchy
runs = run_hierarchy(shifting_gaussians(3), [3000] * 4, 11)
h = hashlib.sha256()
for r in runs:
    h.update(r.qoi_fine.tobytes())
    if r.qoi_coarse is not None:
        h.update(r.qoi_coarse.tobytes())
print(h.hexdigest())
"""


@pytest.mark.skipif(not NUMBA_ENABLED, reason="numba not active")
def test_full_run_identical_without_numba():
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, MLMCMC_DISABLE_NUMBA=flag)
        outs.append(subprocess.run([sys.executable, "-c", _SCRIPT], env=env, capture_output=True, text=True,
                                   check=True).stdout.strip())
    assert outs[0] == outs[1]
