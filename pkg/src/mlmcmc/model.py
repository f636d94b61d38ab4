"""Posterior hierarchies, quantities of interest and proposals.

All densities are log-densities with respect to one reference measure per
problem (Lebesgue for the 1-D toys, the prior for Darcy). Callables act on a
batch of points of shape ``(n, d)`` and return arrays of shape ``(n,)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, LevelRangeError

BatchFn = Callable[[np.ndarray], np.ndarray]


def as_point(theta) -> np.ndarray:
    """Validate and return a point as a 1-D float array."""
    x = np.atleast_1d(np.asarray(theta, dtype=float))
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"point must be a non-empty 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"point has non-finite coordinates: {x}")
    return x


def as_batch(thetas) -> np.ndarray:
    x = np.asarray(thetas, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DomainError(f"batch must have shape (n, d), got {x.shape}")
    return x


@dataclass(frozen=True)
class LevelTarget:
    """One level of the hierarchy.

    ``log_weight`` returns ``-Phi_l`` (log of the unnormalised density with
    respect to the reference). ``evaluate``, when given, returns
    ``(log_weight, qoi)`` from a single forward solve per point.
    ``kernel_spec`` is an optional ``(jitted_fn, params)`` pair usable inside
    compiled chain loops.
    """

    level: int
    log_weight: BatchFn
    qoi: BatchFn
    eval_cost: float
    evaluate_fn: Optional[Callable[[np.ndarray], tuple]] = None
    kernel_spec: Optional[tuple] = None

    def evaluate(self, thetas):
        x = as_batch(thetas)
        if self.evaluate_fn is not None:
            lw, q = self.evaluate_fn(x)
        else:
            lw, q = self.log_weight(x), self.qoi(x)
        return np.asarray(lw, dtype=float), np.asarray(q, dtype=float)


@dataclass(frozen=True)
class Hierarchy:
    targets: Sequence[LevelTarget]
    refinement_factor: int = 2
    reference_sampler: Optional[Callable[[np.random.Generator], np.ndarray]] = None

    def __post_init__(self):
        if len(self.targets) == 0:
            raise DomainError("hierarchy needs at least one level")
        for k, t in enumerate(self.targets):
            if t.level != k:
                raise DomainError(f"targets must be sorted and contiguous; position {k} holds level {t.level}")
            if t.eval_cost <= 0:
                raise DomainError("eval_cost must be positive")
        costs = [t.eval_cost for t in self.targets]
        if any(b < a for a, b in zip(costs, costs[1:])):
            raise DomainError("eval_cost must be non-decreasing in the level")
        if self.refinement_factor < 2:
            raise DomainError("refinement factor must be >= 2")

    @property
    def max_level(self) -> int:
        return len(self.targets) - 1

    def target(self, level: int) -> LevelTarget:
        if not 0 <= level <= self.max_level:
            raise LevelRangeError(f"level {level} outside 0..{self.max_level}")
        return self.targets[level]

    def cost_per_sample(self, level: int) -> float:
        """Work of one chain step: both levels' evaluations for a coupled step."""
        c = self.target(level).eval_cost
        if level > 0:
            c += self.target(level - 1).eval_cost
        return c


@dataclass(frozen=True)
class IndependentProposal:
    """State-independent proposal; ``log_density`` is relative to the problem reference."""

    log_density: BatchFn
    sample: Callable[[np.random.Generator, int], np.ndarray]
    dim: int = 1
    label: str = ""

    def sampler(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample(rng, 1)[0]


@dataclass(frozen=True)
class ConditionalProposal:
    """Proposal ``Q(theta, .)``; ``log_density(a, b)`` is the log density of moving a -> b."""

    log_density: Callable[[np.ndarray, np.ndarray], float]
    sampler: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    symmetric: bool = False


@dataclass(frozen=True)
class RandomWalkProposal(ConditionalProposal):
    """Gaussian random walk ``N(theta, scale^2 I)``.

    ``reference_log_density`` is the log density of the reference measure
    w.r.t. Lebesgue; ``None`` means the reference is Lebesgue itself.
    """

    scale: float = 1.0
    reference_log_density: Optional[BatchFn] = None


def random_walk(scale: float, reference_log_density: Optional[BatchFn] = None) -> RandomWalkProposal:
    if scale <= 0:
        raise DomainError("random-walk scale must be positive")

    def log_density(a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        r = b - a
        d = r.size
        out = -0.5 * float(r @ r) / scale**2 - d * np.log(scale) - 0.5 * d * np.log(2 * np.pi)
        if reference_log_density is not None:
            out -= float(reference_log_density(b[None, :])[0])
        return out

    def sampler(theta, rng):
        theta = np.asarray(theta, float)
        return theta + scale * rng.standard_normal(theta.shape)

    return RandomWalkProposal(
        log_density=log_density,
        sampler=sampler,
        symmetric=reference_log_density is None,
        scale=float(scale),
        reference_log_density=reference_log_density,
    )


def gaussian_logpdf(x: np.ndarray, mean, var) -> np.ndarray:
    """Log density of ``N(mean, diag(var))`` at each row of ``x``."""
    x = as_batch(x)
    mean = np.broadcast_to(np.asarray(mean, float), (x.shape[1],))
    var = np.broadcast_to(np.asarray(var, float), (x.shape[1],))
    r = x - mean
    return -0.5 * np.sum(r * r / var + np.log(2 * np.pi * var), axis=1)


def gaussian_proposal(mean, var, reference_log_density: Optional[BatchFn] = None) -> IndependentProposal:
    mean = np.atleast_1d(np.asarray(mean, float))
    var = np.broadcast_to(np.atleast_1d(np.asarray(var, float)), mean.shape).copy()
    if np.any(var <= 0):
        raise DomainError("proposal variance must be positive")
    std = np.sqrt(var)

    def log_density(x):
        out = gaussian_logpdf(x, mean, var)
        if reference_log_density is not None:
            out = out - reference_log_density(as_batch(x))
        return out

    def sample(rng, n):
        return mean + std * rng.standard_normal((n, mean.size))

    return IndependentProposal(log_density, sample, dim=mean.size, label=f"N({mean.tolist()},{var.tolist()})")


def log_target(h: Hierarchy, level: int, theta) -> float:
    """``-Phi_l(theta)``: log of the unnormalised level-``level`` density."""
    t = h.target(level)
    x = as_point(theta)
    return float(t.log_weight(x[None, :])[0])


def qoi_eval(h: Hierarchy, level: int, theta) -> float:
    t = h.target(level)
    x = as_point(theta)
    return float(t.qoi(x[None, :])[0])


def tail_check(target: LevelTarget, proposal: IndependentProposal, rng: np.random.Generator,
               n: int = 10_000, threshold: float = 20.0) -> float:
    """Heuristic heavier-tails check for an independent proposal.

    Returns the spread (max minus median, in nats) of ``log_weight - log_q``
    over ``n`` proposal draws and warns when it exceeds ``threshold``.
    """
    z = proposal.sample(rng, n)
    ratio = target.log_weight(z) - proposal.log_density(z)
    spread = float(np.max(ratio) - np.median(ratio))
    if not np.isfinite(spread) or spread > threshold:
        warnings.warn(
            f"proposal may have lighter tails than level-{target.level} target: "
            f"log-ratio spread {spread:.1f} nats > {threshold}",
            RuntimeWarning,
            stacklevel=2,
        )
    return spread


@dataclass(frozen=True)
class Problem:
    """A hierarchy bundled with the proposals used to sample it.

    ``proposal_for(level, previous_run)`` builds the independent proposal for
    ``level >= 1``; ``previous_run`` is the level ``level - 1`` chain (or
    ``None``) for proposals adapted from earlier samples.
    """

    name: str
    hierarchy: Hierarchy
    level0_proposal: ConditionalProposal
    proposal_for: Callable[[int, object], IndependentProposal]
    init_sampler: Callable[[np.random.Generator], np.ndarray]
    exact_mean: Optional[Callable[[int], float]] = None
    exact_qoi: Optional[float] = None
    uses_previous_samples: bool = False
    metadata: dict = None

    @property
    def max_level(self) -> int:
        return self.hierarchy.max_level
