"""Sub-sampling multilevel MCMC, used only as a comparison method.

Level 0 is the usual random-walk chain. The fine chain at level ``l`` uses
the level ``l - 1`` chain, thinned by ``t_l``, as its proposal stream and
accepts with ``min(1, pi_l(z) pi_{l-1}(theta) / (pi_l(theta) pi_{l-1}(z)))``.
The level ``l - 1`` chain is itself the baseline chain of that level, so the
construction recurses down to level 0. ``t_l = min(ceil(IACT), 5)`` is
estimated from a pilot run of the level ``l - 1`` chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import _kernels
from .._accel import NUMBA_ENABLED, python_impl
from ..errors import DomainError
from ..estimator import LevelStats, iact, level_stats, ml_estimate
from ..model import Problem
from ..sampler import ChainRun, default_burnin, run_level0
from ..streams import derive_seed, stream

MAX_RATE = 5


def subsampling_rate(tau: float, cap: int = MAX_RATE) -> int:
    """Thinning interval from an integrated autocorrelation time."""
    if not tau >= 1:
        raise DomainError("IACT is at least 1")
    return int(min(math.ceil(tau), cap))


@dataclass
class BaselineResult:
    runs: list
    stats: list
    rates: list
    estimate: float


class _Builder:
    def __init__(self, problem: Problem, master_seed: int, replica: int, burnin):
        self.problem = problem
        self.h = problem.hierarchy
        self.master = master_seed
        self.replica = replica
        self.burnin = burnin
        self.rates: dict[int, int] = {}

    def nb(self, level, m):
        return default_burnin(m) if self.burnin is None else int(self.burnin[level])

    def chain(self, level: int, m: int, tag: int = 0):
        """``m`` post-burn-in states of the level chain, with the paired coarse states and acceptance flags."""
        seed = derive_seed(self.master, level, self.replica, tag)
        if level == 0:
            init = self.problem.init_sampler(stream(derive_seed(self.master, 0, self.replica, tag, 1)))
            r = run_level0(self.h.target(0), self.problem.level0_proposal, m, self.nb(0, m), seed, init=init)
            return r.theta_fine, None, r.accepted, r.burnin
        t = self.rates[level]
        nb = self.nb(level, m)
        steps = m + nb
        coarse, _, _, _ = self.chain(level - 1, t * steps + 1, tag)
        cand = coarse[::t][: steps + 1]
        lc, _ = self.h.target(level - 1).evaluate(cand)
        lf, _ = self.h.target(level).evaluate(cand)
        log_u = np.log(stream(seed).random(steps))
        scan = _kernels.imh_scan if NUMBA_ENABLED else python_impl(_kernels.imh_scan)
        states, acc = scan(lf - lc, log_u, 0)
        keep = slice(nb, steps)
        return cand[states[keep]], cand[1:][keep], acc[keep], nb

    def pilot_rate(self, level: int, pilot: int) -> int:
        x, _, _, _ = self.chain(level - 1, pilot, tag=1)
        q = self.h.target(level - 1).qoi(x)
        return subsampling_rate(iact(q))


def subsampling_baseline(problem: Problem, samples: Sequence[int], master_seed: int = 0, replica: int = 0,
                         burnin: Optional[Sequence[int]] = None, pilot: int = 10_000,
                         rates: Optional[Sequence[int]] = None) -> BaselineResult:
    """Run the baseline on levels ``0..len(samples)-1``.

    ``rates`` (one per level >= 1) overrides the pilot estimate of ``t_l``.
    """
    L = len(samples) - 1
    if L > problem.max_level:
        raise DomainError(f"problem has only {problem.max_level} levels")
    b = _Builder(problem, master_seed, replica, burnin)
    for level in range(1, L + 1):
        b.rates[level] = int(rates[level - 1]) if rates is not None else b.pilot_rate(level, pilot)
    h = problem.hierarchy
    runs = []
    for level, n in enumerate(samples):
        fine, coarse, acc, nb = b.chain(level, n)
        tf = h.target(level)
        if level == 0:
            run = ChainRun(level=0, n=n, burnin=nb, seed=derive_seed(master_seed, 0, replica, 0),
                           work=float((n + nb) * tf.eval_cost), qoi_fine=np.asarray(tf.qoi(fine), float),
                           accepted=acc, theta_fine=fine)
        else:
            tc = h.target(level - 1)
            run = ChainRun(level=level, n=n, burnin=nb, seed=derive_seed(master_seed, level, replica, 0),
                           work=float((n + nb) * h.cost_per_sample(level)),
                           qoi_fine=np.asarray(tf.qoi(fine), float), qoi_coarse=np.asarray(tc.qoi(coarse), float),
                           sync=np.all(fine == coarse, axis=1), accepted=acc, theta_fine=fine, theta_coarse=coarse)
        runs.append(run)
    stats: list[LevelStats] = [level_stats(r, h) for r in runs]
    return BaselineResult(runs, stats, [b.rates[l] for l in range(1, L + 1)], ml_estimate(stats))
