"""Darcy flow on the unit square with a four-mode log-permeability.

``-div(kappa grad u) = 1`` with ``u = 0`` on ``x1 in {0, 1}`` and zero flux
on ``x2 in {0, 1}``, discretised by cell-centred finite volumes with
harmonic-mean face permeabilities on a ``16 * 2^l`` square grid.

Because kappa depends on ``x1`` only, the discrete system is invariant in
``x2`` and the 2-D solution equals the 1-D line solution copied across rows.
The default path solves that tridiagonal system directly (vectorised over a
batch of parameters); ``method="cg"`` assembles and solves the full 2-D
system and is kept as a cross-check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.linalg import cg

from ..errors import DomainError, LevelRangeError, SolverError
from ..model import Hierarchy, IndependentProposal, LevelTarget, Problem, as_batch, gaussian_logpdf, random_walk
from ..streams import derive_seed, stream
from .kde import kde_mixture_proposal

BASE_CELLS = 16
MAX_LEVEL = 4
OBS_POINTS = np.arange(1, 10) / 10.0
THETA_TRUE = np.array([0.8, -0.6, 0.4, -0.2])
DATA_SEED = 20_160_501
NOISE_STD = 0.004
RWM_STD = 0.05
MIXTURE_WEIGHT = 0.1


def cells(level: int) -> int:
    if not 0 <= level <= MAX_LEVEL:
        raise LevelRangeError(f"Darcy levels run 0..{MAX_LEVEL}, got {level}")
    return BASE_CELLS * 2**level


def log_kappa(x1: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``log kappa`` at abscissae ``x1`` for each row of ``theta``; shape ``(batch, len(x1))``."""
    t = as_batch(theta)
    if t.shape[1] != 4:
        raise DomainError("Darcy parameter must have 4 components")
    px = math.pi * np.asarray(x1, float)
    basis = np.stack([np.cos(px), np.sin(px) / 2, np.cos(2 * px) / 3, np.sin(2 * px) / 4])
    return t @ basis


def _face_coefficients(kappa: np.ndarray, h: float):
    """Transmissibilities ``T_{i+1/2} / h^2`` on the ``n + 1`` x1-faces (batch, n + 1)."""
    b, n = kappa.shape
    t = np.empty((b, n + 1))
    t[:, 1:-1] = 2.0 * kappa[:, :-1] * kappa[:, 1:] / (kappa[:, :-1] + kappa[:, 1:])
    # Dirichlet faces sit half a cell from the centre
    t[:, 0] = 2.0 * kappa[:, 0]
    t[:, -1] = 2.0 * kappa[:, -1]
    return t / h**2


def line_solve(level: int, theta) -> np.ndarray:
    """Tridiagonal solve along ``x1``; returns cell values of shape ``(batch, n)``."""
    n = cells(level)
    h = 1.0 / n
    xc = (np.arange(n) + 0.5) * h
    kappa = np.exp(log_kappa(xc, theta))
    t = _face_coefficients(kappa, h)
    diag = t[:, :-1] + t[:, 1:]
    off = -t[:, 1:-1]
    # Thomas algorithm, vectorised over the batch
    b = kappa.shape[0]
    c = np.empty((b, n - 1))
    d = np.empty((b, n))
    c[:, 0] = off[:, 0] / diag[:, 0]
    d[:, 0] = 1.0 / diag[:, 0]
    for i in range(1, n):
        denom = diag[:, i] - off[:, i - 1] * c[:, i - 1]
        if i < n - 1:
            c[:, i] = off[:, i] / denom
        d[:, i] = (1.0 - off[:, i - 1] * d[:, i - 1]) / denom
    u = np.empty((b, n))
    u[:, -1] = d[:, -1]
    for i in range(n - 2, -1, -1):
        u[:, i] = d[:, i] - c[:, i] * u[:, i + 1]
    return u


def assemble(level: int, theta) -> sp.csr_matrix:
    """Full 2-D five-point finite-volume matrix (row-major, index ``i1 * n + i2``)."""
    n = cells(level)
    h = 1.0 / n
    xc = (np.arange(n) + 0.5) * h
    kappa = np.exp(log_kappa(xc, np.asarray(theta, float)[None, :]))
    t1 = _face_coefficients(kappa, h)[0]
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    diag = np.zeros((n, n))
    # x1-direction couplings (interior faces) and Dirichlet faces
    w = t1[1:-1][:, None] * np.ones((1, n))
    rows += [idx[:-1].ravel(), idx[1:].ravel()]
    cols += [idx[1:].ravel(), idx[:-1].ravel()]
    vals += [-w.ravel(), -w.ravel()]
    diag += t1[:-1][:, None] + t1[1:][:, None]
    # x2-direction: kappa is constant along x2, so the harmonic mean is kappa itself; outer faces carry no flux
    k2 = (kappa[0] / h**2)[:, None] * np.ones((1, n - 1))
    rows += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals += [-k2.ravel(), -k2.ravel()]
    diag[:, :-1] += k2
    diag[:, 1:] += k2
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    return A.tocsr()


def cg_solve(level: int, theta, rtol: float = 1e-10, maxiter: int = 100_000) -> np.ndarray:
    """2-D solve by conjugate gradients; returns the ``(n, n)`` field indexed ``[i1, i2]``."""
    n = cells(level)
    A = assemble(level, theta)
    u, info = cg(A, np.ones(n * n), rtol=rtol, atol=0.0, maxiter=maxiter)
    if info != 0:
        raise SolverError(f"CG did not converge at level {level} (info={info})")
    return u.reshape(n, n)


def _interp_1d(level: int, points: np.ndarray, dirichlet: bool) -> np.ndarray:
    """Linear interpolation matrix from cell centres (plus boundary nodes) to ``points``.

    Dirichlet ends use ghost value 0; Neumann ends copy the adjacent cell.
    Each row sums to 1 over the extended node set.
    """
    n = cells(level)
    h = 1.0 / n
    nodes = np.concatenate([[0.0], (np.arange(n) + 0.5) * h, [1.0]])
    W = np.zeros((points.size, n))
    for r, p in enumerate(points):
        k = min(np.searchsorted(nodes, p, side="right") - 1, n)
        lam = (p - nodes[k]) / (nodes[k + 1] - nodes[k])
        for node, wt in ((k, 1.0 - lam), (k + 1, lam)):
            if node == 0:
                if not dirichlet:
                    W[r, 0] += wt
            elif node == n + 1:
                if not dirichlet:
                    W[r, n - 1] += wt
            else:
                W[r, node - 1] += wt
    return W


@lru_cache(maxsize=None)
def observation_weights(level: int) -> tuple[np.ndarray, np.ndarray]:
    """``(W1, W2)`` so that observation ``(k, m) = sum_ij W1[k,i] W2[m,j] u[i,j]``."""
    return _interp_1d(level, OBS_POINTS, True), _interp_1d(level, OBS_POINTS, False)


def observe(level: int, u: np.ndarray) -> np.ndarray:
    """Bilinear observations of a 2-D field at the 9x9 points, flattened x1-major."""
    W1, W2 = observation_weights(level)
    return (W1 @ u @ W2.T).ravel()


@dataclass(frozen=True)
class DarcySolution:
    u: np.ndarray
    observations: np.ndarray
    qoi: float


def darcy_solve(level: int, theta, method: str = "line") -> DarcySolution:
    """Field on the level grid, the 81 observations and the mean pressure."""
    th = np.asarray(theta, float)
    if th.shape != (4,) or not np.all(np.isfinite(th)):
        raise DomainError("theta must be a finite 4-vector")
    n = cells(level)
    if method == "line":
        u = np.repeat(line_solve(level, th[None, :])[0][:, None], n, axis=1)
    elif method == "cg":
        u = cg_solve(level, th)
    else:
        raise DomainError(f"unknown method {method!r}")
    return DarcySolution(u, observe(level, u), float(u.mean()))


def forward_batch(level: int, thetas) -> tuple[np.ndarray, np.ndarray]:
    """Observations ``(batch, 81)`` and QoI ``(batch,)`` via the line solver."""
    u = line_solve(level, thetas)
    W1, _ = observation_weights(level)
    obs1 = u @ W1.T
    # the field is constant in x2 and each x2-interpolation row sums to 1
    obs = np.repeat(obs1, OBS_POINTS.size, axis=1)
    return obs, u.mean(axis=1)


def synthetic_data(level: int = MAX_LEVEL, theta=THETA_TRUE, noise_std: float = NOISE_STD,
                   seed: int = DATA_SEED) -> np.ndarray:
    obs, _ = forward_batch(level, np.asarray(theta, float)[None, :])
    rng = stream(derive_seed(seed, 0))
    return obs[0] + noise_std * rng.standard_normal(obs.shape[1])


def prior_logpdf(x):
    return gaussian_logpdf(x, 0.0, 1.0)


def prior_proposal() -> IndependentProposal:
    """The prior itself; its density relative to the prior is 1."""
    return IndependentProposal(lambda z: np.zeros(as_batch(z).shape[0]), lambda rng, n: rng.standard_normal((n, 4)),
                               dim=4, label="prior")


def map_point(target: LevelTarget) -> np.ndarray:
    """Posterior mode at one level, found from the prior mean; used as the chain start."""
    def neg_log_post(x):
        return -float(target.log_weight(x[None, :])[0]) + 0.5 * float(x @ x)

    res = minimize(neg_log_post, np.zeros(4), method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 20_000})
    return res.x


@dataclass(frozen=True)
class DarcySpec:
    L_max: int = 3
    data_level: int = MAX_LEVEL
    noise_std: float = NOISE_STD
    rwm_std: float = RWM_STD
    mixture_weight: float = MIXTURE_WEIGHT
    theta_true: tuple = tuple(THETA_TRUE)
    data_seed: int = DATA_SEED
    kde_max_centres: int = 2000
    meta: dict = field(default_factory=dict)


def _darcy_target(level: int, y: np.ndarray, noise_std: float) -> LevelTarget:
    inv = 1.0 / (2.0 * noise_std**2)

    def evaluate(x):
        obs, q = forward_batch(level, as_batch(x))
        r = obs - y
        return -inv * np.sum(r * r, axis=1), q

    return LevelTarget(
        level=level,
        log_weight=lambda x: evaluate(x)[0],
        qoi=lambda x: evaluate(x)[1],
        eval_cost=2.0**level,
        evaluate_fn=evaluate,
    )


def darcy_problem(spec: DarcySpec = DarcySpec()) -> Problem:
    """Posterior hierarchy w.r.t. the ``N(0, I_4)`` prior; ``log_weight = -Phi_l``.

    Level ``l >= 1`` proposes from a prior/KDE mixture fitted to the level
    ``l - 1`` chain; without such a chain it falls back to the prior.
    """
    if not 1 <= spec.L_max <= MAX_LEVEL:
        raise DomainError(f"L_max must be in 1..{MAX_LEVEL}")
    if spec.noise_std <= 0:
        raise DomainError("noise_std must be positive")
    y = synthetic_data(spec.data_level, np.asarray(spec.theta_true), spec.noise_std, spec.data_seed)
    targets = [_darcy_target(l, y, spec.noise_std) for l in range(spec.L_max + 1)]
    start = map_point(targets[0])
    h = Hierarchy(targets, refinement_factor=2, reference_sampler=lambda rng: rng.standard_normal(4))

    def proposal_for(level, previous=None):
        if previous is None or previous.theta_fine is None:
            return prior_proposal()
        return kde_mixture_proposal(previous.theta_fine, spec.mixture_weight, 0.0, 1.0,
                                    reference_is_prior=True, max_centres=spec.kde_max_centres)

    return Problem(
        name="darcy",
        hierarchy=h,
        level0_proposal=random_walk(spec.rwm_std, reference_log_density=prior_logpdf),
        proposal_for=proposal_for,
        init_sampler=lambda rng: start + 0.01 * rng.standard_normal(4),
        uses_previous_samples=True,
        metadata={"theta_true": list(spec.theta_true), "data_seed": spec.data_seed, "data_level": spec.data_level,
                  "noise_std": spec.noise_std, "rwm_std": spec.rwm_std, "mixture_weight": spec.mixture_weight,
                  "y": y.tolist()},
    )
