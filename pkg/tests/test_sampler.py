import csv
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy import stats

from mlmcmc.errors import DomainError, LevelRangeError
from mlmcmc.model import Hierarchy, LevelTarget, as_batch, gaussian_proposal, random_walk
from mlmcmc.problems import nested_gaussians, shifting_gaussians
from mlmcmc.sampler import (ChainRun, InitPolicy, default_burnin, run_coupled, run_hierarchy, run_level0, sync_rate,
                            write_trajectory)


def rwm_acceptance(var, step):
    """Stationary acceptance rate of Gaussian random-walk Metropolis on N(m, var)."""
    return 2.0 / math.pi * math.atan(2.0 * math.sqrt(var) / step)


@pytest.fixture(scope="module")
def nested():
    return nested_gaussians(6)


def test_level0_acceptance_matches_closed_form(nested):
    run = run_level0(nested.hierarchy.target(0), random_walk(1.0), 50_000, seed=3, init=1.0)
    assert rwm_acceptance(2.0, 1.0) == pytest.approx(0.7837, abs=1e-4)
    assert run.acceptance_rate == pytest.approx(rwm_acceptance(2.0, 1.0), abs=0.01)


@pytest.mark.xfail(strict=True, reason="0.40 contradicts the closed-form acceptance 0.784 for N(1,2) with unit steps")
def test_level0_acceptance_quoted_value(nested):
    run = run_level0(nested.hierarchy.target(0), random_walk(1.0), 50_000, seed=3, init=1.0)
    assert abs(run.acceptance_rate - 0.40) <= 0.05


def test_level0_marginal_moments(nested):
    run = run_level0(nested.hierarchy.target(0), random_walk(1.0), 200_000, seed=8, init=1.0)
    x = run.theta_fine[:, 0]
    assert abs(x.mean() - 1.0) < 0.03
    assert abs(x.var() - 2.0) < 0.1


def test_level0_single_sample_bookkeeping(nested):
    t = nested.hierarchy.target(2)
    run = run_level0(t, random_walk(1.0), 1, burnin=0, seed=99, init=0.0)
    assert run.n == 1 and run.qoi_fine.shape == (1,) and run.burnin == 0
    assert run.work == 1 * t.eval_cost


def test_level0_deterministic(nested):
    a = run_level0(nested.hierarchy.target(0), random_walk(1.0), 5000, seed=17, init=0.3)
    b = run_level0(nested.hierarchy.target(0), random_walk(1.0), 5000, seed=17, init=0.3)
    assert np.array_equal(a.theta_fine, b.theta_fine)
    assert np.array_equal(a.accepted, b.accepted)


def test_level0_generic_loop_agrees_with_compiled_path(nested):
    """A target without a compiled spec goes through the Python loop on the same random numbers."""
    t = nested.hierarchy.target(1)
    plain = LevelTarget(1, t.log_weight, t.qoi, t.eval_cost)
    a = run_level0(t, random_walk(1.0), 3000, seed=5, init=0.2)
    b = run_level0(plain, random_walk(1.0), 3000, seed=5, init=0.2)
    np.testing.assert_allclose(a.theta_fine, b.theta_fine, rtol=0, atol=1e-12)


def test_default_burnin():
    assert default_burnin(100) == 1000
    assert default_burnin(50_000) == 5000


def test_coupled_nested_terminal_sync(nested):
    q = nested.proposal_for(6, None)
    run = run_coupled(nested.hierarchy, 6, q, 50_000, seed=21)
    assert sync_rate(run) >= 0.95


def test_coupled_identical_targets_absorb():
    t = lambda l: LevelTarget(l, lambda x: -0.5 * as_batch(x)[:, 0] ** 2, lambda x: as_batch(x)[:, 0], 1.0)
    h = Hierarchy([t(0), t(1)])
    run = run_coupled(h, 1, gaussian_proposal(0.0, 3.0), 5000, burnin=0,
                      init=InitPolicy(np.array([4.0])), seed=2)
    first = int(np.argmax(run.outcomes == 0))
    assert run.sync[first:].all()
    assert sync_rate(run) == pytest.approx(1.0, abs=1e-3)


def test_coupled_deterministic(nested):
    q = nested.proposal_for(3, None)
    a = run_coupled(nested.hierarchy, 3, q, 4000, seed=4)
    b = run_coupled(nested.hierarchy, 3, q, 4000, seed=4)
    for f in ("theta_fine", "theta_coarse", "outcomes", "u", "alpha_fine"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_coupled_level_range(nested):
    with pytest.raises(LevelRangeError):
        run_coupled(nested.hierarchy, 0, nested.proposal_for(1, None), 10)
    with pytest.raises(LevelRangeError):
        run_coupled(nested.hierarchy, 7, nested.proposal_for(1, None), 10)


def test_coupled_outcomes_match_uniforms(nested):
    run = run_coupled(nested.hierarchy, 2, nested.proposal_for(2, None), 3000, seed=6)
    lo = np.minimum(run.alpha_coarse, run.alpha_fine)
    hi = np.maximum(run.alpha_coarse, run.alpha_fine)
    assert np.all((run.outcomes == 0) == (run.u <= lo))
    assert np.all((run.outcomes == 3) == (run.u > hi))
    assert np.all(run.sync == (run.theta_coarse[:, 0] == run.theta_fine[:, 0]))


def test_coupled_fine_marginal_ks(nested):
    """Fine component targets N(1, 1 + 2^-2); thin to reduce correlation."""
    run = run_coupled(nested.hierarchy, 2, nested.proposal_for(2, None), 200_000, seed=31)
    x = run.theta_fine[::5, 0]
    ks = stats.kstest(x, stats.norm(1.0, math.sqrt(1.25)).cdf).statistic
    assert ks < 0.02
    xc = run.theta_coarse[::5, 0]
    assert stats.kstest(xc, stats.norm(1.0, math.sqrt(1.5)).cdf).statistic < 0.02


def test_sync_rate_examples():
    base = dict(level=1, n=4, burnin=0, seed=0, work=4.0, qoi_fine=np.zeros(4), qoi_coarse=np.zeros(4))
    assert sync_rate(ChainRun(sync=np.ones(4, bool), **base)) == 1.0
    assert sync_rate(ChainRun(sync=np.array([True, False, True, False]), **base)) == 0.5
    with pytest.raises(DomainError):
        sync_rate(ChainRun(level=0, n=1, burnin=0, seed=0, work=1.0, qoi_fine=np.zeros(1)))


def test_sync_increases_with_level_shifting():
    p = shifting_gaussians(6)
    q = p.proposal_for(1, None)
    r1 = run_coupled(p.hierarchy, 1, q, 50_000, seed=1)
    r6 = run_coupled(p.hierarchy, 6, q, 50_000, seed=1)
    assert sync_rate(r6) > sync_rate(r1)


def test_run_hierarchy_executor_matches_sequential(nested):
    seq = run_hierarchy(nested, [2000] * 4, 77)
    with ThreadPoolExecutor(3) as ex:
        par = run_hierarchy(nested, [2000] * 4, 77, executor=ex)
    for a, b in zip(seq, par):
        assert a.seed == b.seed
        assert np.array_equal(a.qoi_fine, b.qoi_fine)


def test_run_hierarchy_replicas_differ(nested):
    a = run_hierarchy(nested, [500, 500], 1, replica=0)
    b = run_hierarchy(nested, [500, 500], 1, replica=1)
    assert not np.array_equal(a[1].qoi_fine, b[1].qoi_fine)


def test_run_hierarchy_warm_start(nested):
    runs = run_hierarchy(nested, [1000, 1000, 1000], 3, warm_start=True, keep_samples=True)
    assert len(runs) == 3 and all(r.n == 1000 for r in runs)


def test_run_hierarchy_too_many_levels(nested):
    with pytest.raises(LevelRangeError):
        run_hierarchy(nested, [10] * 8, 0)


def test_write_trajectory(tmp_path, nested):
    run = run_coupled(nested.hierarchy, 1, nested.proposal_for(1, None), 20, burnin=5, seed=0)
    path = tmp_path / "t.csv"
    write_trajectory(run, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "theta_coarse_0", "theta_fine_0", "outcome"]
    assert len(rows) == 21 and rows[1][0] == "6"
    assert float(rows[1][2]) == run.theta_fine[0, 0]


def test_write_trajectory_needs_samples(nested, tmp_path):
    run = run_coupled(nested.hierarchy, 1, nested.proposal_for(1, None), 20, seed=0, keep_samples=False)
    with pytest.raises(DomainError):
        write_trajectory(run, tmp_path / "x.csv")
