"""Sample allocation, tolerance schedule, level selection, rate fitting and the continuation loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContinuationError, DomainError, InfeasibleLevelsError
from .estimator import LevelStats, error_report, level_stats, ml_estimate, statistical_error
from .model import Problem
from .streams import derive_seed


@dataclass
class TuningParams:
    C_w: float
    alpha_w: float
    C_beta: float
    beta: float
    C_gamma: float
    gamma: float
    sigma2: list = field(default_factory=list)

    def variance(self, level: int, s: float) -> float:
        """Observed variance where it is reliable, the power-law model otherwise."""
        if level < len(self.sigma2):
            v = self.sigma2[level]
            if v is not None and math.isfinite(v) and v > 0:
                return v
        return self.C_beta * s ** (-self.beta * level)

    def bias(self, L: int, s: float) -> float:
        return self.C_w * s ** (-self.alpha_w * L)

    def cost(self, level: int, s: float) -> float:
        return self.C_gamma * s ** (self.gamma * level)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Schedule:
    tol: float
    tol0: float
    r1: float
    r2: float
    i_E: int

    def tol_at(self, i: int) -> float:
        if i < 0:
            raise DomainError("schedule index must be >= 0")
        if i < self.i_E:
            return self.r1 ** (self.i_E - i) * self.tol / self.r2
        return self.r2 ** (self.i_E - i) * self.tol / self.r2

    @property
    def tolerances(self) -> list[float]:
        """``tol_0 .. tol_{i_E}``; later entries follow from ``tol_at``."""
        return [self.tol_at(i) for i in range(self.i_E + 1)]


def sample_sizes(sigma2: Sequence[float], cost: Sequence[float], tol: float,
                 corrected: bool = False) -> list[int]:
    """Cost-optimal ``N_l`` for a given tolerance, each at least 1.

    ``corrected=True`` uses the factor ``4 (L+1)`` from solving the variance
    constraint ``2 (L+1) sum sigma2/N <= tol^2 / 2`` exactly instead of 2.
    """
    if len(sigma2) == 0 or len(sigma2) != len(cost):
        raise DomainError("sigma2 and cost must be non-empty and of equal length")
    if not tol > 0:
        raise DomainError("tol must be positive")
    v = np.asarray(sigma2, float)
    c = np.asarray(cost, float)
    if np.any(v < 0) or np.any(c <= 0) or not np.all(np.isfinite(v)):
        raise DomainError("need sigma2 >= 0 and cost > 0")
    factor = 4.0 * len(v) if corrected else 2.0
    total = math.fsum(np.sqrt(v * c))
    raw = factor * tol**-2 * np.sqrt(v / c) * total
    return [max(1, int(math.ceil(x))) for x in raw]


def tol_schedule(tol0: float, tol: float, r1: float, r2: float) -> Schedule:
    if not (r1 >= r2 > 1):
        raise DomainError(f"need r1 >= r2 > 1, got r1={r1}, r2={r2}")
    if not (0 < tol < tol0):
        raise DomainError(f"need 0 < tol < tol0, got tol={tol}, tol0={tol0}")
    i_E = int(math.floor((-math.log(tol) + math.log(r2) + math.log(tol0)) / math.log(r1)))
    return Schedule(tol, tol0, r1, r2, i_E)


def level_objective(L: int, tol_i: float, params: TuningParams, s: float) -> float:
    total = math.fsum(math.sqrt(params.C_beta * s ** (-params.beta * j) * params.cost(j, s)) for j in range(L + 1))
    return 2.0 * tol_i**-2 * 2.0 * (L + 1) * total**2


def select_levels(L_prev: int, L_max: int, tol_i: float, params: TuningParams, s: float) -> int:
    """Cheapest ``L`` in ``[L_prev, L_max]`` meeting the bias constraint (exhaustive search)."""
    if L_prev > L_max:
        raise DomainError(f"L_prev={L_prev} exceeds L_max={L_max}")
    best, best_val = None, math.inf
    for L in range(L_prev, L_max + 1):
        if params.bias(L, s) > tol_i / math.sqrt(2.0):
            continue
        val = level_objective(L, tol_i, params, s)
        if val < best_val:
            best, best_val = L, val
    if best is None:
        min_tol = math.sqrt(2.0) * params.bias(L_max, s)
        raise InfeasibleLevelsError(
            f"no L <= {L_max} meets the bias constraint at tol={tol_i:.4g}; smallest reachable tol is {min_tol:.4g}",
            min_tol,
        )
    return best


def fit_rates(values: Sequence[tuple], s: float) -> tuple[float, float]:
    """Least-squares fit of ``v_l = C s^(-rate l)`` in log space; returns ``(C, rate)``."""
    lv = np.array([float(l) for l, _ in values])
    v = np.array([float(x) for _, x in values])
    if np.unique(lv).size < 2:
        raise DomainError("need at least two distinct levels to fit a rate")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DomainError("rate fit needs strictly positive finite values")
    A = np.column_stack([np.ones_like(lv), -lv * math.log(s)])
    (logC, rate), *_ = np.linalg.lstsq(A, np.log(v), rcond=None)
    return float(math.exp(logC)), float(rate)


@dataclass(frozen=True)
class Regime:
    tag: str
    exponent: float
    log_power: int

    def describe(self) -> str:
        return f"tol^{self.exponent:g} |log tol|^{self.log_power}"


def complexity_regime(beta: float, gamma: float, alpha_w: float, atol: float = 1e-12) -> Regime:
    """Asymptotic cost of the ML estimator as ``tol -> 0``."""
    if not alpha_w > 0:
        raise DomainError("alpha_w must be positive")
    if abs(beta - gamma) <= atol:
        return Regime("beta=gamma", -2.0, 3)
    if beta > gamma:
        return Regime("beta>gamma", -2.0, 1)
    return Regime("beta<gamma", -2.0 - (gamma - beta) / alpha_w, 1)


RATE_FLOOR = 0.5
MIN_FIT_SAMPLES = 100


def _fit_or_default(points, s, default_rate=1.0):
    points = [(l, v) for l, v in points if v > 0 and math.isfinite(v)]
    if len(points) >= 2:
        return fit_rates(points, s)
    if len(points) == 1:
        # single point: pin the constant with a nominal rate
        l, v = points[0]
        return v * s ** (default_rate * l), default_rate
    return 0.0, default_rate


def _floored_fit(points, s, floor):
    """Power-law fit whose rate is at least ``floor``; the constant is refitted at the floored rate."""
    points = [(l, v) for l, v in points if v > 0 and math.isfinite(v)]
    C, rate = _fit_or_default(points, s)
    if points and rate < floor:
        rate = floor
        C = math.exp(math.fsum(math.log(v) + rate * l * math.log(s) for l, v in points) / len(points))
    return C, rate


def fit_params(stats: Sequence[LevelStats], s: float, fit_from: int = 1,
               min_samples: int = MIN_FIT_SAMPLES, rate_floor: float = RATE_FLOOR) -> TuningParams:
    """Fit the weak-error, variance and cost models on levels ``>= fit_from``.

    The weak error model is fitted to ``|Y_l|`` and rescaled so that
    ``C_w s^(-alpha_w L)`` bounds the whole tail ``sum_{j>L} |E Y_j|``.
    Levels with fewer than ``min_samples`` samples are left out of the fits
    and their observed variance is replaced by the model: a short coupled
    chain that never leaves the diagonal reports zero mean and variance.
    Fitted rates are floored at ``rate_floor``, and ``alpha_w`` also at
    ``beta / 2`` since ``|E Y| <= sqrt(E Y^2)``; a few noisy levels otherwise
    yield rates near zero and an unbounded tail constant.
    """
    tail = [st for st in stats if st.level >= fit_from and st.n >= min_samples]
    sigma2 = [st.y_var_asymptotic if (st.n >= min_samples or st.level == 0) else None for st in stats]
    C_b, beta = _floored_fit([(st.level, st.y_var_asymptotic) for st in tail], s, rate_floor)
    C_y, alpha_w = _floored_fit([(st.level, abs(st.y_mean)) for st in tail], s, max(rate_floor, beta / 2))
    C_w = C_y / (1.0 - s ** (-alpha_w))
    C_g, gamma = _fit_or_default([(st.level, st.cost_per_sample) for st in tail], s)
    gamma = -gamma
    return TuningParams(C_w, alpha_w, C_b, beta, C_g, gamma, sigma2)


@dataclass
class ContinuationResult:
    estimate: float
    te: float
    tol: float
    converged: bool
    levels: int
    stats: list
    params: TuningParams
    history: list
    report: object = None

    def as_dict(self) -> dict:
        return {"estimate": self.estimate, "te": self.te, "tol": self.tol, "converged": self.converged,
                "L": self.levels}


def _run_stats(problem, Ns, seed, burnin_fn, executor, previous):
    from .sampler import run_hierarchy

    burnin = None if burnin_fn is None else [burnin_fn(n) for n in Ns]
    runs = run_hierarchy(problem, Ns, seed, burnin=burnin, executor=executor, previous=previous)
    h = problem.hierarchy
    return runs, [level_stats(r, h, keep_raw=False) for r in runs]


def continuation(problem: Problem, tol: float, tol0: float = 0.5, r1: float = 2.0, r2: float = 1.1,
                 n_screen: int = 1000, L0: int = 2, L_max: Optional[int] = None, master_seed: int = 0,
                 max_iter: int = 20, corrected_allocation: bool = False, burnin=None, executor=None,
                 reuse_proposals: bool = True, raise_on_failure: bool = True,
                 n_min: int = MIN_FIT_SAMPLES) -> ContinuationResult:
    """Self-tuning multilevel run down a decreasing tolerance schedule.

    Every iteration restarts all chains with fresh streams; adapted proposals
    (if the problem has them) are rebuilt from the previous iteration's chains
    when ``reuse_proposals`` is set. Every level gets at least ``n_min``
    samples so that each one keeps contributing to the fits.
    """
    h = problem.hierarchy
    s = float(h.refinement_factor)
    L_max = h.max_level if L_max is None else int(L_max)
    if n_screen < 100:
        raise DomainError("screening needs at least 100 samples per level")
    if not 1 <= L0 <= L_max <= h.max_level:
        raise DomainError(f"need 1 <= L0 <= L_max <= {h.max_level}, got L0={L0}, L_max={L_max}")
    sched = tol_schedule(tol0, tol, r1, r2)

    runs, stats = _run_stats(problem, [n_screen] * (L0 + 1), derive_seed(master_seed, 0), burnin, executor, None)
    params = fit_params(stats, s)
    history = [{
        "iteration": 0, "tol_i": sched.tol_at(0), "L": L0, "N": [n_screen] * (L0 + 1),
        "params": params.as_dict(), "te": None, "estimate": ml_estimate(stats), "screening": True,
    }]

    i, te, L = 1, math.inf, L0
    while i < sched.i_E or te > tol * tol:
        if i > max_iter:
            min_tol = math.sqrt(2.0) * params.bias(L_max, s)
            if min_tol > tol:
                err = InfeasibleLevelsError(
                    f"no convergence after {max_iter} iterations: levels up to {L_max} reach tol={min_tol:.4g} "
                    f"at best, target {tol:.4g}", min_tol)
                err.history = history
            else:
                err = ContinuationError(
                    f"no convergence after {max_iter} iterations (te={te:.4g}, tol^2={tol*tol:.4g})", history)
            if raise_on_failure:
                raise err
            break
        tol_i = sched.tol_at(i)
        clamped = False
        try:
            L = select_levels(L, L_max, tol_i, params, s)
        except InfeasibleLevelsError:
            # rate fits from short runs are noisy; use the finest level and let te decide
            L, clamped = L_max, True
        sigma2 = [params.variance(l, s) for l in range(L + 1)]
        cost = [h.cost_per_sample(l) for l in range(L + 1)]
        Ns = [max(n_min, n) for n in sample_sizes(sigma2, cost, tol_i, corrected=corrected_allocation)]
        prev = runs if (reuse_proposals and problem.uses_previous_samples) else None
        runs, stats = _run_stats(problem, Ns, derive_seed(master_seed, i), burnin, executor, prev)
        params = fit_params(stats, s)
        te = statistical_error(stats) + 2.0 * params.bias(L, s) ** 2
        history.append({
            "iteration": i, "tol_i": tol_i, "L": L, "N": Ns, "params": params.as_dict(), "te": te,
            "estimate": ml_estimate(stats), "screening": False, "clamped": clamped,
        })
        i += 1

    report = error_report(stats, params.alpha_w, s, tol) if len(stats) > 1 else None
    return ContinuationResult(
        estimate=ml_estimate(stats), te=te, tol=tol, converged=te <= tol * tol, levels=L,
        stats=stats, params=params, history=history, report=report,
    )
