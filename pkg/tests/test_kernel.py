import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mlmcmc.errors import DomainError, LevelRangeError
from mlmcmc.kernel import (CoupledState, Outcome, classify, coupled_step, imh_accept_prob, mh_accept_prob,
                           single_level_step)
from mlmcmc.model import Hierarchy, LevelTarget, as_batch, gaussian_logpdf, gaussian_proposal, random_walk
from mlmcmc.problems import nested_gaussians

unit = st.floats(0, 1, allow_nan=False)


def gauss_target(level, mean, var, cost=1.0):
    return LevelTarget(level, lambda x: -0.5 * (as_batch(x)[:, 0] - mean) ** 2 / var,
                       lambda x: as_batch(x)[:, 0], cost)


def test_accept_identity_proposal():
    assert imh_accept_prob(-1.3, -1.3, -0.4, -0.4) == 1.0


def test_accept_gaussian_ratio():
    t = lambda x: -((x - 1) ** 2) / 4
    q = lambda x: -((x - 1) ** 2) / 6
    a = imh_accept_prob(t(1.0), t(2.0), q(1.0), q(2.0))
    assert a == pytest.approx(math.exp(-1 / 12), rel=1e-14)
    assert a == pytest.approx(0.92004, abs=1e-5)


@given(x=st.floats(-20, 20), z=st.floats(-20, 20), c=st.floats(-5, 5))
def test_accept_proportional_proposal(x, z, c):
    assert imh_accept_prob(-x * x, -z * z, -x * x + c, -z * z + c) == pytest.approx(1.0, abs=1e-12)


def test_accept_rejects_non_finite():
    with pytest.raises(DomainError):
        imh_accept_prob(0.0, -math.inf, 0.0, 0.0)


@given(u=unit, a=unit, b=unit)
def test_classify_partition(u, a, b):
    k = classify(u, a, b)
    lo, hi = min(a, b), max(a, b)
    if u <= lo:
        assert k is Outcome.BOTH_ACCEPTED
    elif u > hi:
        assert k is Outcome.BOTH_REJECTED
    elif a < b:
        assert k is Outcome.FINE_ONLY
    else:
        assert k is Outcome.COARSE_ONLY


def test_coupling_law_on_unit_interval():
    u = np.linspace(0, 1, 100_001)[:-1]
    kinds = np.array([classify(x, 0.3, 0.7) for x in u])
    freq = np.bincount(kinds, minlength=4) / u.size
    np.testing.assert_allclose(freq, [0.3, 0.4, 0.0, 0.3], atol=1e-4)


def test_coupled_step_level0_is_range_error(rng):
    p = nested_gaussians(2)
    q = p.proposal_for(1, None)
    st_ = CoupledState.on_diagonal(p.hierarchy, 1, q, 1.0)
    with pytest.raises(LevelRangeError):
        coupled_step(p.hierarchy, 0, q, st_, rng)


def test_identical_targets_stay_synchronized(rng):
    h = Hierarchy([gauss_target(0, 0.0, 1.0), gauss_target(1, 0.0, 1.0)])
    q = gaussian_proposal(0.0, 3.0)
    s = CoupledState.on_diagonal(h, 1, q, 0.5)
    for _ in range(500):
        s, out = coupled_step(h, 1, q, s, rng)
        assert out.alpha_coarse == out.alpha_fine
        assert s.synchronized


def test_certain_acceptance_moves_both_to_proposal(rng):
    # proposal equal to both targets: alpha = 1 everywhere
    h = Hierarchy([gauss_target(0, 0.0, 1.0), gauss_target(1, 0.0, 1.0)])
    q = gaussian_proposal(0.0, 1.0)
    s = CoupledState(np.array([0.3]), np.array([-1.0]), -0.045, -0.5,
                     float(q.log_density(np.array([[0.3]]))[0]), float(q.log_density(np.array([[-1.0]]))[0]))
    s2, out = coupled_step(h, 1, q, s, rng)
    assert out.kind is Outcome.BOTH_ACCEPTED
    assert np.array_equal(s2.theta_coarse, out.proposal) and np.array_equal(s2.theta_fine, out.proposal)


def test_coupled_step_caches_are_fresh(rng):
    p = nested_gaussians(3)
    h = p.hierarchy
    q = p.proposal_for(2, None)
    s = CoupledState.on_diagonal(h, 2, q, 0.0)
    for _ in range(200):
        s, out = coupled_step(h, 2, q, s, rng)
        assert out.kind == classify(out.u, out.alpha_coarse, out.alpha_fine)
        assert s.log_t_coarse == h.target(1).log_weight(s.theta_coarse[None])[0]
        assert s.log_t_fine == h.target(2).log_weight(s.theta_fine[None])[0]
        assert s.log_q_fine == q.log_density(s.theta_fine[None])[0]
        assert s.synchronized == (s.theta_coarse[0] == s.theta_fine[0])


def test_coupled_step_marginal_is_imh(rng):
    """The fine component alone is an IMH chain on the fine target."""
    p = nested_gaussians(2)
    h = p.hierarchy
    q = p.proposal_for(1, None)
    s = CoupledState.on_diagonal(h, 1, q, 1.0)
    xs = []
    for _ in range(20_000):
        s, _ = coupled_step(h, 1, q, s, rng)
        xs.append(s.theta_fine[0])
    xs = np.array(xs[1000:])
    assert abs(xs.mean() - 1.0) < 0.1
    assert abs(xs.var() - 1.5) < 0.15


def test_mh_uphill_symmetric():
    t = gauss_target(0, 1.0, 2.0)
    assert mh_accept_prob(t, random_walk(1.0), np.array([3.0]), np.array([1.5])) == 1.0


def test_mh_gaussian_rwm_ratio():
    t = gauss_target(0, 1.0, 2.0)
    a = mh_accept_prob(t, random_walk(1.0), np.array([1.0]), np.array([2.0]))
    assert a == pytest.approx(math.exp(-0.25), rel=1e-14)


def test_mh_same_point():
    t = gauss_target(0, 1.0, 2.0)
    assert mh_accept_prob(t, random_walk(1.0), np.array([0.4]), np.array([0.4])) == 1.0


def test_mh_non_finite_proposal_target():
    t = LevelTarget(0, lambda x: np.where(as_batch(x)[:, 0] > 0, -np.inf, 0.0), lambda x: as_batch(x)[:, 0], 1.0)
    with pytest.raises(DomainError):
        mh_accept_prob(t, random_walk(1.0), np.array([-1.0]), np.array([1.0]))


def test_mh_non_symmetric_uses_reverse_density():
    ref = lambda x: gaussian_logpdf(x, 0.0, 1.0)
    t = LevelTarget(0, lambda x: np.zeros(len(as_batch(x))), lambda x: as_batch(x)[:, 0], 1.0)
    q = random_walk(0.5, reference_log_density=ref)
    a = mh_accept_prob(t, q, np.array([0.0]), np.array([1.0]))
    # density w.r.t. prior: ratio of reverse and forward is prior(z)/prior(theta)
    assert a == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_single_level_step_returns_consistent_flags(rng):
    t = gauss_target(0, 1.0, 2.0)
    x = np.array([1.0])
    for _ in range(200):
        y, acc, a = single_level_step(t, random_walk(1.0), x, rng)
        assert 0 <= a <= 1
        assert acc == (not np.array_equal(y, x)) or acc
        x = y
