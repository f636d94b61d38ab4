"""Prior / kernel-density mixture used as an adapted independent proposal."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ..errors import DomainError
from ..model import IndependentProposal, as_batch, gaussian_logpdf

BANDWIDTH_FLOOR = 1e-3


def silverman_bandwidth(samples: np.ndarray, floor: float = BANDWIDTH_FLOOR) -> np.ndarray:
    """Per-coordinate Silverman rule, floored so degenerate coordinates stay usable."""
    x = as_batch(samples)
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    h = sd * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))
    return np.maximum(h, floor)


def kde_logpdf(points: np.ndarray, centres: np.ndarray, bandwidth: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Log density (w.r.t. Lebesgue) of the equal-weight Gaussian KDE."""
    z = as_batch(points)
    c = as_batch(centres)
    h = np.broadcast_to(np.asarray(bandwidth, float), (c.shape[1],))
    n = c.shape[0]
    const = -np.sum(np.log(h)) - 0.5 * c.shape[1] * math.log(2 * math.pi) - math.log(n)
    out = np.empty(z.shape[0])
    cs = c / h
    for a in range(0, z.shape[0], chunk):
        zs = z[a : a + chunk] / h
        d2 = (zs * zs).sum(1)[:, None] - 2.0 * zs @ cs.T + (cs * cs).sum(1)[None, :]
        out[a : a + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0), axis=1) + const
    return out


def kde_mixture_proposal(samples, weight: float = 0.1, prior_mean=0.0, prior_var=1.0,
                         reference_is_prior: bool = True, bandwidth: Optional[np.ndarray] = None,
                         max_centres: Optional[int] = None) -> IndependentProposal:
    """Mixture ``w * prior + (1 - w) * KDE(samples)`` with a Gaussian prior.

    The returned log density is relative to the prior when
    ``reference_is_prior`` (as for the PDE problem) and to Lebesgue otherwise.
    ``max_centres`` thins the sample set (evenly spaced along the chain).
    """
    x = as_batch(samples)
    if x.shape[0] < 1:
        raise DomainError("KDE needs at least one sample")
    if not 0 < weight <= 1:
        raise DomainError("mixture weight must lie in (0, 1]")
    if max_centres is not None and x.shape[0] > max_centres:
        x = x[np.linspace(0, x.shape[0] - 1, max_centres).astype(int)]
    d = x.shape[1]
    h = silverman_bandwidth(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,)).copy()
    mu = np.broadcast_to(np.asarray(prior_mean, float), (d,)).copy()
    pv = np.broadcast_to(np.asarray(prior_var, float), (d,)).copy()
    lw, l1w = math.log(weight), (math.log1p(-weight) if weight < 1 else -math.inf)

    def log_density(z):
        z = as_batch(z)
        lp = gaussian_logpdf(z, mu, pv)
        if weight == 1:
            mix = lp
        else:
            lk = kde_logpdf(z, x, h)
            mix = np.logaddexp(lw + lp, l1w + lk)
        return mix - lp if reference_is_prior else mix

    def sample(gen, n):
        from_prior = gen.random(n) < weight
        idx = gen.integers(0, x.shape[0], n)
        eps = gen.standard_normal((n, d))
        kde_draw = x[idx] + h * eps
        prior_draw = mu + np.sqrt(pv) * eps
        return np.where(from_prior[:, None], prior_draw, kde_draw)

    return IndependentProposal(log_density, sample, dim=d, label=f"kde-mixture(w={weight}, n={x.shape[0]})")
