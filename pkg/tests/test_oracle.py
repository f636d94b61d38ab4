import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from mlmcmc.errors import DomainError, LevelRangeError
from mlmcmc.model import Hierarchy, LevelTarget, Problem, as_batch, gaussian_proposal, random_walk
from mlmcmc.oracle import (adjoint, auto_bounds, build_grid_kernel, density_ratio_sup, diagonal_start,
                           empirical_mse_check, ensure_stationary, imh_matrix, marginal_defect, marginal_tv,
                           marginalize, mse_bound, offdiag_mass, oracle_report, pseudo_spectral_gap,
                           restrict_to_support, stationary, tv_convergence)
from mlmcmc.problems import darcy_problem, nested_gaussians, shifting_gaussians


@pytest.fixture(scope="module")
def nested3():
    gk = build_grid_kernel(nested_gaussians(6), 3, n=64)
    ensure_stationary(gk)
    return gk


def _flat():
    t = lambda l: LevelTarget(l, lambda x: -0.5 * as_batch(x)[:, 0] ** 2, lambda x: as_batch(x)[:, 0], 1.0)
    q = gaussian_proposal(0.0, 3.0)
    return Problem("flat", Hierarchy([t(0), t(1)]), random_walk(1.0), lambda l, prev=None: q,
                   lambda rng: q.sample(rng, 1)[0])


def test_identical_targets_diagonal_support():
    gk = build_grid_kernel(_flat(), 1, n=32)
    assert offdiag_mass(gk) < 1e-10
    mc, mf = marginalize(gk)
    np.testing.assert_array_equal(mc, mf)


def test_rows_are_stochastic(nested3, rng):
    P = nested3.P
    assert P.min() >= 0
    rows = rng.integers(0, P.shape[0], 200)
    np.testing.assert_allclose(np.asarray(P[rows].sum(axis=1)).ravel(), 1.0, atol=1e-12)


def test_auto_bounds_cover_mass():
    a, b = auto_bounds(nested_gaussians(6), 3)
    assert a < -5 and b > 7
    assert a + b == pytest.approx(2.0, abs=1e-6)  # symmetric about the common mean 1


def test_fixed_bounds_too_narrow_for_proposal():
    # N(1, 3) puts ~5e-4 of its mass outside [-5, 7]
    with pytest.raises(DomainError):
        build_grid_kernel(nested_gaussians(6), 3, n=64, bounds=(-5.0, 7.0))


def test_grid_rejects_level0_and_darcy():
    with pytest.raises(LevelRangeError):
        build_grid_kernel(nested_gaussians(3), 0)
    with pytest.raises(DomainError):
        build_grid_kernel(darcy_problem(), 1)


def test_marginal_tv_nested3(nested3):
    assert marginal_tv(nested3) < 1e-3


def test_marginalised_rows_equal_direct_imh(nested3):
    assert marginal_defect(nested3) < 1e-12
    mc, mf = marginalize(nested3)
    np.testing.assert_allclose(mc, imh_matrix(nested3.target_coarse, nested3.proposal), atol=1e-12, rtol=0)
    np.testing.assert_allclose(mf, imh_matrix(nested3.target_fine, nested3.proposal), atol=1e-12, rtol=0)


def test_marginal_stationary_is_posterior(nested3):
    mc, mf = marginalize(nested3)
    for P, t in ((mc, nested3.target_coarse), (mf, nested3.target_fine)):
        pi = stationary(P)
        assert 0.5 * np.abs(pi - t).sum() < 1e-6


def test_imh_matrix_detailed_balance(nested3):
    P = imh_matrix(nested3.target_fine, nested3.proposal)
    flow = nested3.target_fine[:, None] * P
    np.testing.assert_allclose(flow, flow.T, atol=1e-15)


def test_two_state_gap():
    P = np.array([[0.75, 0.25], [0.25, 0.75]])
    g = pseudo_spectral_gap(P, np.array([0.5, 0.5]), k_max=3)
    assert g.per_k[0] == pytest.approx(0.75, abs=1e-12)
    assert g.per_k[1] == pytest.approx(0.46875, abs=1e-12)
    assert g.gamma_ps == pytest.approx(0.75, abs=1e-12) and g.argmax_k == 1


def test_gap_requires_positive_nu():
    with pytest.raises(DomainError):
        pseudo_spectral_gap(np.eye(2), np.array([1.0, 0.0]))


@settings(max_examples=25)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_adjoint_inner_product(n, seed):
    r = np.random.default_rng(seed)
    P = r.random((n, n)) + 0.05
    P /= P.sum(axis=1, keepdims=True)
    nu = stationary(P)
    f, g = r.standard_normal(n), r.standard_normal(n)
    Ps = adjoint(P, nu).toarray()
    assert np.sum(nu * f * (P @ g)) == pytest.approx(np.sum(nu * (Ps @ f) * g), rel=1e-9, abs=1e-12)
    np.testing.assert_allclose(Ps.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=25)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_reversible_chain_gap_matches_spectrum(n, seed):
    """For a reversible chain the k=1 term is 1 - lambda_2^2 (second largest |eigenvalue|)."""
    r = np.random.default_rng(seed)
    S = r.random((n, n)) + 0.1
    S = S + S.T
    P = S / S.sum(axis=1, keepdims=True)
    nu = S.sum(axis=1) / S.sum()
    lam = np.sort(np.abs(np.linalg.eigvals(P)))[-2]
    g = pseudo_spectral_gap(P, nu, k_max=1)
    assert g.per_k[0] == pytest.approx(1 - lam**2, abs=1e-9)


def test_mse_bound_arithmetic():
    assert mse_bound(0.5, 0.0, 2.0, 100) == pytest.approx(0.18)
    assert mse_bound(1.0, 1.0, 1.0, 10) == pytest.approx(1.5)
    with pytest.raises(DomainError):
        mse_bound(0.0, 0.0, 1.0, 10)


def test_tv_geometric_from_point_mass(nested3):
    nu = nested3.nu
    n = nested3.n
    i = int(np.argmax(nested3.target_fine))
    start = np.zeros(n * n)
    start[i * (n + 1)] = 1.0
    tv = tv_convergence(nested3.P, nu, start, T=200)
    assert tv.distances[200] < 1e-4
    assert 0 < tv.rate < 1 and tv.r2 > 0.99
    other = tv_convergence(nested3.P, nu, diagonal_start(nested3), T=200)
    assert other.rate == pytest.approx(tv.rate, rel=0.1)


def test_density_ratio_needs_absolute_continuity():
    with pytest.raises(DomainError):
        density_ratio_sup(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert density_ratio_sup(np.array([0.5, 0.5]), np.array([0.25, 0.75])) == pytest.approx(1.0)


def test_restrict_to_support_keeps_rows_stochastic(nested3):
    sub, nu_sub, idx = restrict_to_support(nested3.P, nested3.nu)
    np.testing.assert_allclose(np.asarray(sub.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert np.all(nu_sub > 0) and idx.size == nu_sub.size


def test_restrict_refuses_to_drop_mass():
    P = sp.csr_matrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
    with pytest.raises(DomainError):
        restrict_to_support(P, np.array([0.5, 0.5]), cutoff=2.0)


@pytest.fixture(scope="module")
def nested2():
    gk = build_grid_kernel(nested_gaussians(6), 2, n=64)
    ensure_stationary(gk)
    sub, nu_sub, _ = restrict_to_support(gk.P, gk.nu)
    return gk, pseudo_spectral_gap(sub, nu_sub)


def test_empirical_mse_below_bound(nested2):
    gk, gap = nested2
    chk = empirical_mse_check(gk, 500, 10_000, seed=1, gap=gap)
    assert chk.passed and chk.empirical <= chk.bound


def test_empirical_mse_scales_inverse_n(nested2):
    gk, gap = nested2
    a = empirical_mse_check(gk, 500, 10_000, seed=2, gap=gap)
    b = empirical_mse_check(gk, 2000, 10_000, seed=3, gap=gap)
    assert a.empirical / b.empirical == pytest.approx(4.0, rel=0.3)


def test_oracle_report_json():
    rep = oracle_report(shifting_gaussians(2), 1, n=32, mse_n=100, replicas=500)
    doc = json.loads(rep.to_json())
    assert doc["passed"] == rep.passed
    assert set(doc["checks"]) == {"marginal_tv", "marginal_defect", "gamma_ps", "tv_geometric", "mse_bound"}
