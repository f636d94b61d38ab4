"""One-step transition kernels: level-0 Metropolis-Hastings and the coupled IMH step."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, LevelRangeError
from .model import ConditionalProposal, Hierarchy, IndependentProposal, LevelTarget, as_point


class Outcome(enum.IntEnum):
    BOTH_ACCEPTED = 0
    FINE_ONLY = 1
    COARSE_ONLY = 2
    BOTH_REJECTED = 3


def classify(u: float, alpha_coarse: float, alpha_fine: float) -> Outcome:
    acc_c = u <= alpha_coarse
    acc_f = u <= alpha_fine
    if acc_c and acc_f:
        return Outcome.BOTH_ACCEPTED
    if acc_f:
        return Outcome.FINE_ONLY
    if acc_c:
        return Outcome.COARSE_ONLY
    return Outcome.BOTH_REJECTED


@dataclass(frozen=True)
class CoupledState:
    theta_coarse: np.ndarray
    theta_fine: np.ndarray
    log_t_coarse: float
    log_t_fine: float
    log_q_coarse: float
    log_q_fine: float

    @property
    def synchronized(self) -> bool:
        return np.array_equal(self.theta_coarse, self.theta_fine)

    @classmethod
    def on_diagonal(cls, h: Hierarchy, level: int, q: IndependentProposal, theta) -> "CoupledState":
        x = as_point(theta)
        lq = float(q.log_density(x[None, :])[0])
        lc = float(h.target(level - 1).log_weight(x[None, :])[0])
        lf = float(h.target(level).log_weight(x[None, :])[0])
        return cls(x, x, lc, lf, lq, lq)


@dataclass(frozen=True)
class StepOutcome:
    kind: Outcome
    proposal: np.ndarray
    u: float
    alpha_coarse: float
    alpha_fine: float


def imh_accept_prob(log_t_cur: float, log_t_prop: float, log_q_cur: float, log_q_prop: float) -> float:
    """Independence-sampler acceptance probability, evaluated in log space."""
    vals = (log_t_cur, log_t_prop, log_q_cur, log_q_prop)
    if not all(math.isfinite(v) for v in vals):
        raise DomainError(f"acceptance inputs must be finite, got {vals}")
    log_ratio = (log_t_prop - log_t_cur) + (log_q_cur - log_q_prop)
    return math.exp(min(0.0, log_ratio))


def coupled_step(h: Hierarchy, level: int, q: IndependentProposal, state: CoupledState,
                 rng: np.random.Generator) -> tuple[CoupledState, StepOutcome]:
    """Advance the coupled pair with one shared proposal and one shared uniform."""
    if level < 1 or level > h.max_level:
        raise LevelRangeError(f"coupled_step needs 1 <= level <= {h.max_level}, got {level}")
    z = np.asarray(q.sampler(rng), float)
    u = float(rng.random())
    zb = z[None, :]
    lq = float(q.log_density(zb)[0])
    lc = float(h.target(level - 1).log_weight(zb)[0])
    lf = float(h.target(level).log_weight(zb)[0])
    a_c = imh_accept_prob(state.log_t_coarse, lc, state.log_q_coarse, lq)
    a_f = imh_accept_prob(state.log_t_fine, lf, state.log_q_fine, lq)
    kind = classify(u, a_c, a_f)
    if u <= a_c:
        tc, ltc, lqc = z, lc, lq
    else:
        tc, ltc, lqc = state.theta_coarse, state.log_t_coarse, state.log_q_coarse
    if u <= a_f:
        tf, ltf, lqf = z, lf, lq
    else:
        tf, ltf, lqf = state.theta_fine, state.log_t_fine, state.log_q_fine
    return CoupledState(tc, tf, ltc, ltf, lqc, lqf), StepOutcome(kind, z, u, a_c, a_f)


def single_level_step(target: LevelTarget, q: ConditionalProposal, theta,
                      rng: np.random.Generator) -> tuple[np.ndarray, bool, float]:
    """Metropolis-Hastings step with the general ratio ``pi(z)Q(z,theta) / pi(theta)Q(theta,z)``."""
    x = as_point(theta)
    z = np.asarray(q.sampler(x, rng), float)
    u = float(rng.random())
    alpha = mh_accept_prob(target, q, x, z)
    if u <= alpha:
        return z, True, alpha
    return x, False, alpha


def mh_accept_prob(target: LevelTarget, q: ConditionalProposal, theta: np.ndarray, z: np.ndarray) -> float:
    lt = target.log_weight(np.vstack([theta, z]))
    lt_cur, lt_prop = float(lt[0]), float(lt[1])
    if not math.isfinite(lt_cur):
        raise DomainError("current state has non-finite log target")
    if q.symmetric:
        fwd = rev = 0.0
    else:
        fwd = float(q.log_density(theta, z))
        rev = float(q.log_density(z, theta))
    if not (math.isfinite(fwd) and math.isfinite(rev)):
        raise DomainError("proposal log density is not finite")
    if not math.isfinite(lt_prop):
        raise DomainError(f"non-finite log target at proposal {z}")
    return math.exp(min(0.0, (lt_prop - lt_cur) + (rev - fwd)))
