"""Chain drivers: the level-0 Metropolis chain and the coupled IMH chains."""
from __future__ import annotations

import csv
import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from ._accel import NUMBA_ENABLED, python_impl
from .errors import DomainError, LevelRangeError
from .kernel import Outcome, single_level_step
from .model import (ConditionalProposal, Hierarchy, IndependentProposal, LevelTarget, Problem,
                    RandomWalkProposal, as_point)
from .streams import derive_seed, stream


def default_burnin(n: int) -> int:
    return max(1000, n // 10)


@dataclass(frozen=True)
class InitPolicy:
    """Where a coupled chain starts.

    ``point=None`` draws the start from the level proposal and places both
    components on it; otherwise both components start at ``point`` (e.g. the
    last state of the previous level's fine chain).
    """

    point: Optional[np.ndarray] = None

    @classmethod
    def diagonal(cls) -> "InitPolicy":
        return cls(None)

    @classmethod
    def warm(cls, point) -> "InitPolicy":
        return cls(as_point(point))

    @property
    def kind(self) -> str:
        return "diagonal" if self.point is None else "warm"


@dataclass
class ChainRun:
    level: int
    n: int
    burnin: int
    seed: int
    work: float
    qoi_fine: np.ndarray
    qoi_coarse: Optional[np.ndarray] = None
    sync: Optional[np.ndarray] = None
    outcomes: Optional[np.ndarray] = None
    accepted: Optional[np.ndarray] = None
    theta_fine: Optional[np.ndarray] = None
    theta_coarse: Optional[np.ndarray] = None
    alpha_coarse: Optional[np.ndarray] = None
    alpha_fine: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    last_fine: Optional[np.ndarray] = None

    @property
    def acceptance_rate(self) -> float:
        if self.accepted is not None:
            return float(np.mean(self.accepted))
        return float(np.mean(self.outcomes != Outcome.BOTH_REJECTED))

    @property
    def coupled(self) -> bool:
        return self.level > 0


def _logu(u: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(u)


def _rwm_kernel():
    return _kernels.rwm_scan if NUMBA_ENABLED else python_impl(_kernels.rwm_scan)


def run_level0(target: LevelTarget, proposal: ConditionalProposal, n: int, burnin: Optional[int] = None,
               seed: int = 0, init=None, keep_samples: bool = True) -> ChainRun:
    """Single Metropolis-Hastings chain; ``n`` samples are kept after ``burnin`` steps."""
    if n < 1:
        raise DomainError("need n >= 1")
    nb = default_burnin(n) if burnin is None else int(burnin)
    if nb < 0:
        raise DomainError("burn-in must be >= 0")
    x0 = as_point(np.zeros(1) if init is None else init)
    m = n + nb
    rng = stream(seed)
    d = x0.size

    if isinstance(proposal, RandomWalkProposal):
        eps = rng.standard_normal((m, d))
        log_u = _logu(rng.random(m))
        if target.kernel_spec is not None and proposal.symmetric:
            fn, params = target.kernel_spec
            thetas, accepted = _rwm_kernel()(fn, np.asarray(params, float), x0, proposal.scale, eps, log_u)
            kept = thetas[nb:]
            qoi = np.asarray(target.qoi(kept), float)
        else:
            thetas, accepted, qoi_all = _rwm_loop(target, proposal, x0, eps, log_u)
            kept = thetas[nb:]
            qoi = qoi_all[nb:]
    else:
        thetas = np.empty((m, d))
        accepted = np.empty(m, bool)
        x = x0
        for k in range(m):
            x, accepted[k], _ = single_level_step(target, proposal, x, rng)
            thetas[k] = x
        kept = thetas[nb:]
        qoi = np.asarray(target.qoi(kept), float)

    return ChainRun(
        level=target.level,
        n=n,
        burnin=nb,
        seed=int(seed),
        work=float(m * target.eval_cost),
        qoi_fine=qoi,
        accepted=accepted[nb:],
        theta_fine=kept if keep_samples else None,
        last_fine=thetas[-1].copy(),
    )


def _rwm_loop(target: LevelTarget, proposal: RandomWalkProposal, x0, eps, log_u):
    # one target evaluation per step; the QoI comes from the same forward solve
    m, d = eps.shape
    ref = proposal.reference_log_density
    thetas = np.empty((m, d))
    qoi = np.empty(m)
    accepted = np.empty(m, bool)
    lw_cur, q_cur = (v[0] for v in target.evaluate(x0[None, :]))
    if not math.isfinite(lw_cur):
        raise DomainError("initial state has non-finite log target")
    r_cur = float(ref(x0[None, :])[0]) if ref is not None else 0.0
    cur = x0.copy()
    for k in range(m):
        z = cur + proposal.scale * eps[k]
        lw, qz = (v[0] for v in target.evaluate(z[None, :]))
        if not math.isfinite(lw):
            raise DomainError(f"non-finite log target at proposal {z}")
        r_z = float(ref(z[None, :])[0]) if ref is not None else 0.0
        # Q(z, theta)/Q(theta, z) w.r.t. the reference reduces to ref(z)/ref(theta)
        if log_u[k] <= (lw - lw_cur) + (r_z - r_cur):
            cur, lw_cur, q_cur, r_cur = z, lw, qz, r_z
            accepted[k] = True
        else:
            accepted[k] = False
        thetas[k] = cur
        qoi[k] = q_cur
    return thetas, accepted, qoi


def _imh_kernel():
    return _kernels.imh_scan if NUMBA_ENABLED else python_impl(_kernels.imh_scan)


def run_coupled(h: Hierarchy, level: int, q: IndependentProposal, n: int, burnin: Optional[int] = None,
                init: InitPolicy = InitPolicy(), seed: int = 0, keep_samples: bool = True) -> ChainRun:
    """Coupled IMH chains targeting levels ``level - 1`` and ``level``.

    All proposals are state-independent, so they are drawn and evaluated up
    front (one evaluation per level per step) and the accept/reject sweep runs
    in a compiled loop.
    """
    if level < 1 or level > h.max_level:
        raise LevelRangeError(f"coupled run needs 1 <= level <= {h.max_level}, got {level}")
    if n < 1:
        raise DomainError("need n >= 1")
    nb = default_burnin(n) if burnin is None else int(burnin)
    if nb < 0:
        raise DomainError("burn-in must be >= 0")
    m = n + nb
    rng = stream(seed)
    z0 = q.sample(rng, 1) if init.point is None else init.point[None, :]
    zs = q.sample(rng, m)
    u = rng.random(m)
    z = np.vstack([z0, zs])

    lq = np.asarray(q.log_density(z), float)
    lc, qc = h.target(level - 1).evaluate(z)
    lf, qf = h.target(level).evaluate(z)
    for name, arr in (("proposal", lq), ("coarse target", lc), ("fine target", lf)):
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"non-finite {name} log density at a proposed point")
    w_c = lc - lq
    w_f = lf - lq
    log_u = _logu(u)
    scan = _imh_kernel()
    sc, acc_c = scan(w_c, log_u, 0)
    sf, acc_f = scan(w_f, log_u, 0)

    kinds = np.full(m, Outcome.BOTH_REJECTED, dtype=np.int8)
    kinds[acc_c & ~acc_f] = Outcome.COARSE_ONLY
    kinds[acc_f & ~acc_c] = Outcome.FINE_ONLY
    kinds[acc_c & acc_f] = Outcome.BOTH_ACCEPTED
    prev_c = np.concatenate([[0], sc[:-1]])
    prev_f = np.concatenate([[0], sf[:-1]])
    steps = np.arange(1, m + 1)
    alpha_c = np.exp(np.minimum(0.0, w_c[steps] - w_c[prev_c]))
    alpha_f = np.exp(np.minimum(0.0, w_f[steps] - w_f[prev_f]))

    keep = slice(nb, m)
    ic, jf = sc[keep], sf[keep]
    return ChainRun(
        level=level,
        n=n,
        burnin=nb,
        seed=int(seed),
        work=float(m * h.cost_per_sample(level)),
        qoi_fine=qf[jf],
        qoi_coarse=qc[ic],
        sync=ic == jf,
        outcomes=kinds[keep],
        theta_fine=z[jf] if keep_samples else None,
        theta_coarse=z[ic] if keep_samples else None,
        alpha_coarse=alpha_c[keep],
        alpha_fine=alpha_f[keep],
        u=u[keep],
        last_fine=z[sf[-1]].copy(),
    )


def sync_rate(run: ChainRun) -> float:
    if run.sync is None:
        raise DomainError("synchronization is defined for coupled (level >= 1) runs only")
    return float(np.mean(run.sync))


def run_hierarchy(problem: Problem, samples: Sequence[int], master_seed: int, replica: int = 0,
                  burnin: Optional[Sequence[int]] = None, warm_start: bool = False,
                  keep_samples: bool = False, executor: Optional[Executor] = None,
                  previous: Optional[Sequence[ChainRun]] = None) -> list[ChainRun]:
    """Run levels ``0..len(samples)-1`` once each.

    Level ``l`` uses the stream ``derive_seed(master_seed, l, replica)``.
    Problems whose proposals adapt to earlier samples (or ``warm_start``) run
    level by level; otherwise levels may be dispatched to ``executor``.
    ``previous`` optionally supplies earlier runs to build adapted proposals
    from (they take precedence over this call's lower-level runs).
    """
    L = len(samples) - 1
    if L > problem.max_level:
        raise LevelRangeError(f"requested {L} levels but problem has {problem.max_level}")
    nbs = [default_burnin(n) if burnin is None else burnin[l] for l, n in enumerate(samples)]
    h = problem.hierarchy
    keep = keep_samples or problem.uses_previous_samples

    def level0():
        seed = derive_seed(master_seed, 0, replica)
        x0 = problem.init_sampler(stream(derive_seed(master_seed, 0, replica, 1)))
        return run_level0(h.target(0), problem.level0_proposal, samples[0], nbs[0], seed, init=x0,
                          keep_samples=keep)

    def coupled(level, prev_run):
        src = previous[level - 1] if previous is not None and level - 1 < len(previous) else prev_run
        q = problem.proposal_for(level, src)
        init = InitPolicy.warm(prev_run.last_fine) if (warm_start and prev_run is not None) else InitPolicy()
        return run_coupled(h, level, q, samples[level], nbs[level], init,
                           derive_seed(master_seed, level, replica), keep_samples=keep)

    sequential = problem.uses_previous_samples or warm_start or executor is None
    if sequential:
        runs = [level0()]
        for level in range(1, L + 1):
            runs.append(coupled(level, runs[-1]))
        return runs
    futures = [executor.submit(level0)] + [executor.submit(coupled, level, None) for level in range(1, L + 1)]
    return [f.result() for f in futures]


def write_trajectory(run: ChainRun, path) -> None:
    """Dump a run as CSV with header ``step,theta_coarse...,theta_fine...,outcome``."""
    if run.theta_fine is None:
        raise DomainError("run was made without keep_samples; no trajectory to write")
    d = run.theta_fine.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"theta_coarse_{i}" for i in range(d)] + [f"theta_fine_{i}" for i in range(d)]
                   + ["outcome"])
        for k in range(run.n):
            if run.coupled:
                coarse = [repr(float(v)) for v in run.theta_coarse[k]]
                outcome = Outcome(int(run.outcomes[k])).name
            else:
                coarse = [""] * d
                outcome = "ACCEPTED" if run.accepted[k] else "REJECTED"
            w.writerow([k + run.burnin + 1] + coarse + [repr(float(v)) for v in run.theta_fine[k]] + [outcome])
