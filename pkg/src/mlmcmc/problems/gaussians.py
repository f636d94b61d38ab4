"""One-dimensional Gaussian hierarchies with closed-form moments."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .._kernels import gaussian_logw
from ..errors import DomainError
from ..model import Hierarchy, LevelTarget, Problem, as_batch, gaussian_proposal, random_walk


@dataclass(frozen=True)
class GaussianSpec:
    mean: Callable[[int], float]
    var: Callable[[int], float]
    proposal_mean: float
    proposal_var: float
    limit_mean: float
    rwm_std: float = 1.0


NESTED = GaussianSpec(mean=lambda l: 1.0, var=lambda l: 1.0 + 2.0**-l, proposal_mean=1.0, proposal_var=3.0,
                      limit_mean=1.0)
SHIFTING = GaussianSpec(mean=lambda l: 2.0 ** (2 - l), var=lambda l: 1.0, proposal_mean=2.0,
                        proposal_var=3.0, limit_mean=0.0)


def _identity(x):
    return as_batch(x)[:, 0].copy()


def _level_target(level: int, mean: float, var: float) -> LevelTarget:
    def log_weight(x):
        r = as_batch(x)[:, 0] - mean
        return -0.5 * r * r / var

    return LevelTarget(
        level=level,
        log_weight=log_weight,
        qoi=_identity,
        eval_cost=2.0**level,
        kernel_spec=(gaussian_logw, np.array([mean, 1.0 / var])),
    )


def gaussian_problem(name: str, spec: GaussianSpec, L_max: int) -> Problem:
    if L_max < 1:
        raise DomainError("need L_max >= 1")
    if spec.proposal_var <= 0:
        raise DomainError("proposal variance must be positive")
    targets = []
    for l in range(L_max + 1):
        v = spec.var(l)
        if v <= 0:
            raise DomainError(f"level {l} variance must be positive")
        targets.append(_level_target(l, spec.mean(l), v))
    q = gaussian_proposal(spec.proposal_mean, spec.proposal_var)
    h = Hierarchy(targets, refinement_factor=2)
    return Problem(
        name=name,
        hierarchy=h,
        level0_proposal=random_walk(spec.rwm_std),
        proposal_for=lambda level, previous=None: q,
        init_sampler=lambda rng: q.sample(rng, 1)[0],
        exact_mean=spec.mean,
        exact_qoi=spec.limit_mean,
        metadata={"spec": name, "proposal": [spec.proposal_mean, spec.proposal_var], "rwm_std": spec.rwm_std,
                  "exact_var": [spec.var(l) for l in range(L_max + 1)]},
    )


def nested_gaussians(L_max: int = 6) -> Problem:
    """Posteriors ``N(1, 1 + 2^-l)`` with the fixed proposal ``N(1, 3)``."""
    return gaussian_problem("nested", NESTED, L_max)


def shifting_gaussians(L_max: int = 6) -> Problem:
    """Posteriors ``N(2^(2-l), 1)`` with the fixed proposal ``N(2, 3)``."""
    return gaussian_problem("shifting", SHIFTING, L_max)
