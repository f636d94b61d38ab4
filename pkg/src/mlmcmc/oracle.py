"""Finite-state checks of the coupled kernel on 1-D problems.

The coupled chain is discretised on a uniform midpoint grid of ``n`` points,
giving an exactly stochastic transition matrix over the ``n^2`` pair states
``(i, j)`` (coarse index ``i``, fine index ``j``, flattened as ``i * n + j``).
Everything the theory promises can then be checked with linear algebra:
stationarity, the marginal kernels, geometric convergence in total
variation, the pseudo-spectral gap and the non-asymptotic MSE bound.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, eigsh

from . import _kernels
from ._accel import NUMBA_ENABLED, python_impl
from .errors import DomainError, LevelRangeError
from .model import Problem
from .streams import stream

MAX_GRID = 128
OUTSIDE_MASS = 1e-6
_SCAN = np.linspace(-200.0, 200.0, 400_001)


@dataclass
class GridKernel:
    level: int
    grid: np.ndarray
    dx: float
    target_coarse: np.ndarray
    target_fine: np.ndarray
    proposal: np.ndarray
    P: sp.csr_matrix
    nu: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.grid.size


def _log_densities(problem: Problem, level: int):
    h = problem.hierarchy
    if level < 1 or level > h.max_level:
        raise LevelRangeError(f"oracle levels run 1..{h.max_level}, got {level}")
    q = problem.proposal_for(level, None)
    if q.dim != 1:
        raise DomainError("the grid oracle supports 1-D parameters only")
    fc = lambda x: h.target(level - 1).log_weight(x[:, None])
    ff = lambda x: h.target(level).log_weight(x[:, None])
    fq = lambda x: q.log_density(x[:, None])
    return fc, ff, fq


def _scan_masses(logf: Callable, a: float, b: float) -> float:
    """Mass of the normalised density outside ``[a, b]``, by fine quadrature on a wide window."""
    lv = logf(_SCAN)
    w = np.exp(lv - lv.max())
    w /= w.sum()
    return float(w[(_SCAN < a) | (_SCAN > b)].sum())


def auto_bounds(problem: Problem, level: int, tail: float = 1e-10) -> tuple[float, float]:
    """Smallest window holding all but ``tail`` of each density on either side."""
    lo, hi = math.inf, -math.inf
    for f in _log_densities(problem, level):
        lv = f(_SCAN)
        w = np.exp(lv - lv.max())
        c = np.cumsum(w) / w.sum()
        lo = min(lo, _SCAN[np.searchsorted(c, tail)])
        hi = max(hi, _SCAN[np.searchsorted(c, 1.0 - tail)])
    return float(lo), float(hi)


def _discretise(logf, x):
    lv = logf(x)
    w = np.exp(lv - lv.max())
    return w / w.sum()


def build_grid_kernel(problem: Problem, level: int, n: int = 64, bounds: Optional[tuple] = None) -> GridKernel:
    """Pair-state transition matrix of the coupled independence sampler."""
    if not 2 <= n <= MAX_GRID:
        raise DomainError(f"grid size must be in 2..{MAX_GRID}, got {n}")
    fc, ff, fq = _log_densities(problem, level)
    a, b = auto_bounds(problem, level) if bounds is None else (float(bounds[0]), float(bounds[1]))
    if not b > a:
        raise DomainError("grid bounds must satisfy a < b")
    for name, f in (("coarse target", fc), ("fine target", ff), ("proposal", fq)):
        out = _scan_masses(f, a, b)
        if out > OUTSIDE_MASS:
            raise DomainError(f"grid [{a:g}, {b:g}] too narrow: {name} has mass {out:.3g} outside")
    dx = (b - a) / n
    x = a + (np.arange(n) + 0.5) * dx
    tc, tf, q = _discretise(fc, x), _discretise(ff, x), _discretise(fq, x)
    P = pair_matrix(tc, tf, q)
    return GridKernel(level, x, dx, tc, tf, q, P)


def _acceptance(t: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``alpha[i, k] = min(1, t_k q_i / (t_i q_k))``."""
    w = np.log(t) - np.log(q)
    return np.exp(np.minimum(0.0, w[None, :] - w[:, None]))


def pair_matrix(tc: np.ndarray, tf: np.ndarray, q: np.ndarray) -> sp.csr_matrix:
    n = q.size
    Ac = _acceptance(tc, q)
    Af = _acceptance(tf, q)
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    a_c = Ac[i, k]
    a_f = Af[j, k]
    qk = q[k]
    src = i * n + j
    both = qk * np.minimum(a_c, a_f)
    c_only = qk * np.maximum(a_c - a_f, 0.0)
    f_only = qk * np.maximum(a_f - a_c, 0.0)
    rows = np.concatenate([src.ravel(), src.ravel(), src.ravel()])
    cols = np.concatenate([(k * n + k).ravel(), (k * n + j).ravel(), (i * n + k).ravel()])
    vals = np.concatenate([both.ravel(), c_only.ravel(), f_only.ravel()])
    moved = sp.coo_matrix((vals, (rows, cols)), shape=(n * n, n * n)).tocsr()
    stay = 1.0 - np.asarray(moved.sum(axis=1)).ravel()
    P = (moved + sp.diags(stay)).tocsr()
    P.sum_duplicates()
    return P


def imh_matrix(target: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Single-chain independence-sampler matrix built directly from its definition."""
    n = q.size
    P = np.empty((n, n))
    for i in range(n):
        for k in range(n):
            P[i, k] = q[k] * min(1.0, (target[k] * q[i]) / (target[i] * q[k]))
        P[i, i] = 0.0
        P[i, i] = 1.0 - P[i].sum()
    return P


def marginal_blocks(gk: GridKernel) -> tuple[np.ndarray, np.ndarray]:
    """Destination-marginal rows for every source pair: shapes ``(n, n, n)`` indexed ``[i, j, dest]``."""
    n = gk.n
    dest = np.arange(n * n)
    ones = np.ones(n * n)
    to_coarse = sp.csr_matrix((ones, (dest, dest // n)), shape=(n * n, n))
    to_fine = sp.csr_matrix((ones, (dest, dest % n)), shape=(n * n, n))
    mc = (gk.P @ to_coarse).toarray().reshape(n, n, n)
    mf = (gk.P @ to_fine).toarray().reshape(n, n, n)
    return mc, mf


def marginalize(gk: GridKernel) -> tuple[np.ndarray, np.ndarray]:
    """Coarse and fine marginal kernels ``(n x n)``.

    The coarse row for source ``i`` is read at fine index ``j = i`` (and
    likewise for the fine kernel); ``marginal_defect`` measures how much the
    rows vary with the other coordinate.
    """
    mc, mf = marginal_blocks(gk)
    idx = np.arange(gk.n)
    return mc[idx, idx], mf[idx, idx]


def marginal_defect(gk: GridKernel) -> float:
    """Largest entrywise gap between any marginalised row and the direct IMH matrix."""
    mc, mf = marginal_blocks(gk)
    Pc = imh_matrix(gk.target_coarse, gk.proposal)
    Pf = imh_matrix(gk.target_fine, gk.proposal)
    dc = np.abs(mc - Pc[:, None, :]).max()
    df = np.abs(mf - Pf[None, :, :]).max()
    return float(max(dc, df))


def stationary(P, tol: float = 1e-12, max_iter: int = 1_000_000, start: Optional[np.ndarray] = None) -> np.ndarray:
    """Invariant distribution by power iteration ``nu <- nu P``.

    Stops when the largest change relative to the current entry drops below ``tol``.
    """
    P = sp.csr_matrix(P)
    m = P.shape[0]
    nu = np.full(m, 1.0 / m) if start is None else np.asarray(start, float) / np.sum(start)
    PT = P.T.tocsr()
    for _ in range(max_iter):
        new = PT @ nu
        new /= new.sum()
        scale = np.maximum(new, 1e-300)
        if np.max(np.abs(new - nu) / scale) <= tol:
            return new
        nu = new
    raise DomainError(f"power iteration did not converge in {max_iter} steps")


def ensure_stationary(gk: GridKernel) -> np.ndarray:
    if gk.nu is None:
        n = gk.n
        # start from the diagonal of the fine target; the fixed point does not depend on it
        start = np.full(n * n, 1e-3 / (n * n))
        start[np.arange(n) * (n + 1)] += gk.target_fine
        gk.nu = stationary(gk.P, start=start)
    return gk.nu


def marginals(gk: GridKernel) -> tuple[np.ndarray, np.ndarray]:
    nu = ensure_stationary(gk).reshape(gk.n, gk.n)
    return nu.sum(axis=1), nu.sum(axis=0)


def marginal_tv(gk: GridKernel) -> float:
    c, f = marginals(gk)
    return float(max(0.5 * np.abs(c - gk.target_coarse).sum(), 0.5 * np.abs(f - gk.target_fine).sum()))


def offdiag_mass(gk: GridKernel) -> float:
    nu = ensure_stationary(gk).reshape(gk.n, gk.n)
    return float(1.0 - np.trace(nu))


def adjoint(P, nu: np.ndarray) -> sp.csr_matrix:
    """Adjoint in ``L2(nu)``: ``P*(x, y) = nu(y) P(y, x) / nu(x)``."""
    nu = np.asarray(nu, float)
    if np.any(nu <= 0):
        raise DomainError("adjoint needs a strictly positive nu")
    P = sp.csr_matrix(P)
    return (sp.diags(1.0 / nu) @ P.T @ sp.diags(nu)).tocsr()


def restrict_to_support(P, nu: np.ndarray, cutoff: float = 1e-30, max_dropped: float = 1e-12):
    """Chain restricted to the states carrying invariant mass.

    Some pair states are transient and have ``nu = 0``; others are recurrent
    but so far in the tails that their mass is below double precision. States
    with ``nu <= cutoff * max(nu)`` are dropped and the (negligible) flow into
    them is returned to the diagonal so the restriction stays stochastic.
    Returns ``(P_sub, nu_sub, index)``.
    """
    nu = np.asarray(nu, float)
    keep = nu > cutoff * nu.max()
    dropped = float(nu[~keep].sum())
    if dropped > max_dropped:
        raise DomainError(f"restriction would drop invariant mass {dropped:.3g}")
    idx = np.flatnonzero(keep)
    sub = sp.csr_matrix(P)[idx][:, idx].tocsr()
    leak = 1.0 - np.asarray(sub.sum(axis=1)).ravel()
    sub = (sub + sp.diags(leak)).tocsr()
    return sub, nu[idx] / nu[idx].sum(), idx


@dataclass(frozen=True)
class GapResult:
    gamma_ps: float
    argmax_k: int
    per_k: tuple


def _top_eigenvalue(apply, size, dense_limit=600):
    if size <= dense_limit:
        B = np.column_stack([apply(e) for e in np.eye(size)])
        return float(np.linalg.eigvalsh(0.5 * (B + B.T))[-1])
    op = LinearOperator((size, size), matvec=apply, dtype=float)
    v0 = np.random.default_rng(0).standard_normal(size)
    return float(eigsh(op, k=1, which="LA", tol=1e-10, v0=v0, return_eigenvectors=False)[0])


def pseudo_spectral_gap(P, nu: np.ndarray, k_max: int = 10) -> GapResult:
    """``max_k (1 - ||P^k||^2 on L2_0(nu)) / k`` via the symmetrised form ``D^1/2 P D^-1/2``."""
    nu = np.asarray(nu, float)
    if np.any(nu <= 0) or not np.all(np.isfinite(nu)):
        raise DomainError("pseudo-spectral gap needs a strictly positive nu")
    P = sp.csr_matrix(P)
    r = np.sqrt(nu)
    A = (sp.diags(r) @ P @ sp.diags(1.0 / r)).tocsr()
    AT = A.T.tocsr()
    m = nu.size
    per_k = []
    for k in range(1, k_max + 1):
        def apply(v, k=k):
            v = v - r * (r @ v)
            w = v
            for _ in range(k):
                w = A @ w
            for _ in range(k):
                w = AT @ w
            return w - r * (r @ w)

        lam = min(max(_top_eigenvalue(apply, m), 0.0), 1.0)
        per_k.append((1.0 - lam) / k)
    best = int(np.argmax(per_k))
    return GapResult(float(per_k[best]), best + 1, tuple(per_k))


def mse_bound(gamma_ps: float, dens_ratio_sup: float, var_f: float, n: int) -> float:
    """Non-asymptotic MSE bound ``(1 + 4/gamma)(1 + 2 sup|dnu0/dnu - 1|) V / N``."""
    if not gamma_ps > 0:
        raise DomainError("gamma_ps must be positive")
    if dens_ratio_sup < 0 or n < 1:
        raise DomainError("need dens_ratio_sup >= 0 and N >= 1")
    c_inv = 1.0 + 4.0 / gamma_ps
    return (c_inv + 2.0 * dens_ratio_sup * c_inv) * var_f / n


@dataclass(frozen=True)
class TVResult:
    distances: np.ndarray
    rate: float
    r2: float
    fit_range: tuple


def tv_convergence(P, nu: np.ndarray, nu0: np.ndarray, T: int = 200, floor: float = 1e-11,
                   skip: int = 1) -> TVResult:
    """``||nu0 P^t - nu||_TV`` for ``t = 0..T`` with a log-linear fit over the decaying range.

    The fit starts at ``t = skip`` and stops before the distances reach ``floor``.
    """
    P = sp.csr_matrix(P)
    PT = P.T.tocsr()
    mu = np.asarray(nu0, float).copy()
    d = np.empty(T + 1)
    for t in range(T + 1):
        d[t] = 0.5 * np.abs(mu - nu).sum()
        mu = PT @ mu
    below = np.flatnonzero(d < floor)
    stop = int(below[0]) if below.size else T + 1
    ts = np.arange(skip, stop)
    if ts.size < 3:
        return TVResult(d, 0.0 if d[min(skip, T)] == 0 else float("nan"), float("nan"), (skip, stop))
    y = np.log(d[ts])
    slope, icpt = np.polyfit(ts, y, 1)
    resid = y - (slope * ts + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid**2) / ss) if ss > 0 else 1.0
    return TVResult(d, float(math.exp(slope)), r2, (skip, stop))


def diagonal_start(gk: GridKernel, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Initial law on the diagonal; defaults to the discretised proposal."""
    n = gk.n
    w = gk.proposal if weights is None else np.asarray(weights, float) / np.sum(weights)
    nu0 = np.zeros(n * n)
    nu0[np.arange(n) * (n + 1)] = w
    return nu0


def density_ratio_sup(nu0: np.ndarray, nu: np.ndarray) -> float:
    """``sup |dnu0/dnu - 1|`` over the support of ``nu``; ``nu0`` must not charge null states."""
    nu0, nu = np.asarray(nu0, float), np.asarray(nu, float)
    pos = nu > 0
    if np.any(nu0[~pos] > 0):
        raise DomainError("initial law is not absolutely continuous w.r.t. nu")
    return float(np.max(np.abs(nu0[pos] / nu[pos] - 1.0)))


@dataclass(frozen=True)
class MSECheck:
    empirical: float
    bound: float
    passed: bool
    target_value: float
    variance: float
    gamma_ps: float
    dens_ratio_sup: float
    n: int
    replicas: int


def _grid_scan():
    return _kernels.grid_coupled_scan if NUMBA_ENABLED else python_impl(_kernels.grid_coupled_scan)


def empirical_mse_check(gk: GridKernel, n: int = 500, replicas: int = 10_000, values_coarse=None,
                        values_fine=None, seed: int = 0, gap: Optional[GapResult] = None) -> MSECheck:
    """Replicated grid chains from the diagonal start versus the MSE bound.

    ``f(i, j) = values_fine[j] - values_coarse[i]``; the default is the grid
    coordinate, i.e. the level correction for the identity QoI.
    """
    nu = ensure_stationary(gk)
    vc = gk.grid if values_coarse is None else np.asarray(values_coarse, float)
    vf = gk.grid if values_fine is None else np.asarray(values_fine, float)
    f = (vf[None, :] - vc[:, None]).ravel()
    mean_f = float(nu @ f)
    var_f = float(nu @ (f - mean_f) ** 2)
    if gap is None:
        P_sub, nu_sub, _ = restrict_to_support(gk.P, nu)
        gap = pseudo_spectral_gap(P_sub, nu_sub)
    sup = density_ratio_sup(diagonal_start(gk), nu)
    bound = mse_bound(gap.gamma_ps, sup, var_f, n)

    rng = stream(seed)
    cdf = np.cumsum(gk.proposal)
    cdf[-1] = 1.0
    start = np.searchsorted(cdf, rng.random(replicas), side="right")
    props = np.searchsorted(cdf, rng.random((n, replicas)), side="right").astype(np.int64)
    with np.errstate(divide="ignore"):
        log_u = np.log(rng.random((n, replicas)))
    w_c = np.log(gk.target_coarse) - np.log(gk.proposal)
    w_f = np.log(gk.target_fine) - np.log(gk.proposal)
    sums = _grid_scan()(start, start.copy(), w_c, w_f, props, log_u, vc, vf)
    err = sums / n - mean_f
    emp = float(np.mean(err**2))
    return MSECheck(emp, bound, emp <= bound, mean_f, var_f, gap.gamma_ps, sup, n, replicas)


@dataclass
class OracleReport:
    level: int
    grid_n: int
    marginal_tv: float
    marginal_defect: float
    gamma_ps: float
    argmax_k: int
    tv_fit_rate: float
    tv_fit_r2: float
    offdiag_mass: float
    support_size: int
    mse_empirical: Optional[float] = None
    mse_bound: Optional[float] = None

    def checks(self) -> dict:
        out = {
            "marginal_tv": self.marginal_tv < 1e-3,
            "marginal_defect": self.marginal_defect < 1e-12,
            "gamma_ps": self.gamma_ps > 0,
            "tv_geometric": 0 < self.tv_fit_rate < 1 and self.tv_fit_r2 > 0.99,
        }
        if self.mse_empirical is not None:
            out["mse_bound"] = self.mse_empirical <= self.mse_bound
        return out

    @property
    def passed(self) -> bool:
        return all(self.checks().values())

    def to_json(self) -> str:
        d = asdict(self)
        d["checks"] = self.checks()
        d["passed"] = self.passed
        return json.dumps(d, indent=2)


def oracle_report(problem: Problem, level: int, n: int = 64, bounds=None, mse_n: Optional[int] = 500,
                  replicas: int = 10_000, seed: int = 0, T: int = 200) -> OracleReport:
    gk = build_grid_kernel(problem, level, n, bounds)
    nu = ensure_stationary(gk)
    P_sub, nu_sub, _ = restrict_to_support(gk.P, nu)
    gap = pseudo_spectral_gap(P_sub, nu_sub)
    tv = tv_convergence(gk.P, nu, diagonal_start(gk), T)
    rep = OracleReport(level, n, marginal_tv(gk), marginal_defect(gk), gap.gamma_ps, gap.argmax_k, tv.rate, tv.r2,
                       offdiag_mass(gk), int(nu_sub.size))
    if mse_n:
        chk = empirical_mse_check(gk, mse_n, replicas, seed=seed, gap=gap)
        rep.mse_empirical, rep.mse_bound = chk.empirical, chk.bound
    return rep
