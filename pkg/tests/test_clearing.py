"""Finite-population clearing: populations, residual estimator, rate fit,
and security replacement."""

import numpy as np
import pytest

from mfequil import (
    ClearingReport,
    DiscreteDist,
    EqgSpec,
    IllConditionedQ,
    InsufficientSpan,
    LiabilitySpec,
    MarketSpec,
    MissingStageOutput,
    RegressionBasis,
    ReplacementSpec,
    TimeGrid,
    agent_strategies,
    build_population,
    clearing_residual,
    fresh_idio_levels,
    gamma_hat,
    project,
    random_replacement,
    rate_fit,
    replacement_invariance,
    run_clearing_study,
    simulate_paths,
    solve_mean_field,
    terminal_g,
)
from mfequil.paths import KIND_AUX, normal_block_array

GAMMA_DIST = DiscreteDist(values=(1.0, 2.0, 4.0), probs=(0.5, 0.3, 0.2))


# ---------------------------------------------------------------- populations

def test_discrete_dist_validation():
    with pytest.raises(ValueError):
        DiscreteDist(values=(1.0, 2.0), probs=(0.5, 0.3, 0.2))
    with pytest.raises(ValueError):
        DiscreteDist(values=(1.0, 2.0), probs=(0.7, 0.7))
    with pytest.raises(ValueError):
        DiscreteDist(values=(1.0, 2.0), probs=(-0.1, 1.1))
    assert np.allclose(DiscreteDist(values=(1.0, 2.0)).p, [0.5, 0.5])


def test_draw_ids_inverts_cdf():
    ids = GAMMA_DIST.draw_ids(np.array([0.0, 0.49, 0.5, 0.79, 0.81, 0.999, 1.0]))
    assert ids.tolist() == [0, 0, 1, 1, 2, 2, 2]


def test_balanced_ids_largest_remainder():
    # quotas 3.5 / 2.1 / 1.4: the extra seat goes to the largest remainder
    counts = np.bincount(GAMMA_DIST.balanced_ids(7), minlength=3)
    assert counts.tolist() == [4, 2, 1]
    counts = np.bincount(GAMMA_DIST.balanced_ids(10), minlength=3)
    assert counts.tolist() == [5, 3, 2]
    for n in (1, 2, 3, 17, 100):
        assert GAMMA_DIST.balanced_ids(n).shape == (n,)


def test_balanced_population_matches_harmonic_mean():
    pop = build_population(10, 99, GAMMA_DIST, balanced=True)
    stats = gamma_hat(pop.gammas)
    # exact atom counts 5/3/2 -> mean(1/gamma) = 0.7 with no sampling noise
    assert stats.gamma_hat * np.mean(1.0 / pop.gammas) == pytest.approx(1.0, abs=1e-15)
    assert stats.gamma_hat == pytest.approx(1.0 / 0.7, abs=1e-14)
    assert np.all(pop.xis == 0.0)


def test_population_draws_are_seeded():
    a = build_population(500, 11, GAMMA_DIST)
    b = build_population(500, 11, GAMMA_DIST)
    c = build_population(500, 12, GAMMA_DIST)
    assert np.array_equal(a.gammas, b.gammas)
    assert not np.array_equal(a.gammas, c.gammas)
    freq = np.bincount(a.atom_ids, minlength=3) / 500
    assert np.max(np.abs(freq - GAMMA_DIST.p)) < 0.08
    with pytest.raises(ValueError):
        build_population(0, 11, GAMMA_DIST)


def test_xi_draws_come_from_their_atoms():
    xi_dist = DiscreteDist(values=(-1.0, 3.0))
    pop = build_population(200, 5, GAMMA_DIST, xi_dist=xi_dist)
    assert set(np.unique(pop.xis)) <= {-1.0, 3.0}
    assert len(set(np.unique(pop.xis))) == 2


def test_fresh_idio_levels_are_brownian():
    grid = TimeGrid(0.5, 10)
    w = fresh_idio_levels(31, 8, 5, grid)
    assert w.shape == (8, 5, 11)
    assert np.all(w[:, :, 0] == 0.0)
    dw = normal_block_array(31, KIND_AUX, (8, 5, 10)) * np.sqrt(grid.dt)
    assert np.allclose(np.diff(w, axis=2), dw, atol=1e-15)


# ---------------------------------------------------------- residual estimator

def test_clearing_residual_constant_positions():
    # per-capita position is c in every slot -> eps_N = c^2 * n * T exactly
    M0, pool, steps, n = 6, 12, 10, 2
    dt = 0.05
    c = 0.3
    pi = np.full((M0, pool, steps, n), c)
    eps, ses = clearing_residual(pi, [3, 12], dt, n_batches=3)
    expected = c * c * n * steps * dt
    assert eps == pytest.approx([expected, expected], rel=1e-12)
    assert ses == pytest.approx([0.0, 0.0], abs=1e-15)


def test_clearing_residual_is_permutation_invariant():
    rng = np.random.default_rng(4)
    pi = rng.normal(size=(5, 9, 7, 2))
    eps, _ = clearing_residual(pi, [4, 9], 0.1)
    perm = rng.permutation(9)
    eps_p, _ = clearing_residual(pi[:, perm], [4, 9], 0.1)
    # the N=9 sum runs over the whole pool in canonical order: bit identical
    assert eps[1] == eps_p[1]
    # the N=4 prefix genuinely changes membership
    assert eps[0] != eps_p[0]


def test_clearing_residual_input_checks():
    pi = np.zeros((4, 5, 3, 1))
    with pytest.raises(ValueError):
        clearing_residual(pi, [6], 0.1)
    with pytest.raises(ValueError):
        clearing_residual(pi[:1], [2], 0.1)


def test_clearing_report_validation():
    with pytest.raises(ValueError):
        ClearingReport(Ns=[10, 10], eps=[1.0, 1.0], stderr=[0.1, 0.1],
                       gamma_hat=1.0, gamma_lo=1.0, bmo_proxy=1.0)
    with pytest.raises(ValueError):
        ClearingReport(Ns=[10, 20], eps=[1.0, -1.0], stderr=[0.1, 0.1],
                       gamma_hat=1.0, gamma_lo=1.0, bmo_proxy=1.0)


# ----------------------------------------------------------------- rate fit

def _report(Ns, eps):
    return ClearingReport(Ns=list(Ns), eps=list(eps), stderr=[0.0] * len(Ns),
                          gamma_hat=1.5, gamma_lo=1.0, bmo_proxy=0.02)


def test_rate_fit_recovers_exact_power_law():
    Ns = [10, 30, 100, 300, 1000]
    C = 0.7
    rep = rate_fit(_report(Ns, [C / n for n in Ns]))
    assert rep.slope == pytest.approx(-1.0, abs=1e-12)
    assert rep.intercept == pytest.approx(np.log(C), abs=1e-12)
    assert rep.bound_const == pytest.approx(4.0 * (1.0 + 1.5**2) * 0.02)
    # N * eps_N = 0.7 > bound_const * 1.25 = 0.325: every flag trips
    assert rep.bound_ok == [False] * 5
    rep2 = rate_fit(_report(Ns, [1e-3 / n for n in Ns]))
    assert rep2.bound_ok == [True] * 5


def test_rate_fit_span_preconditions():
    with pytest.raises(InsufficientSpan):
        rate_fit(_report([10, 30, 100], [0.1, 0.03, 0.01]))
    with pytest.raises(InsufficientSpan):
        rate_fit(_report([10, 15, 20, 25], [0.1, 0.07, 0.05, 0.04]))
    with pytest.raises(ValueError):
        rate_fit(_report([10, 30, 100, 1000], [0.1, 0.01, 0.0, 0.001]))


# ------------------------------------------------------------ strategy maps

def _small_mf(collect_fits):
    grid = TimeGrid(0.5, 10)
    market = MarketSpec(n=1, d0=2, d=1, sigma=[[1.0, 0.2]],
                        lambda_lo=1.0, lambda_hi=1.1)
    spec = EqgSpec(alpha=-0.5, beta=0.1, delta=(0.4, 0.1), x0=0.3,
                   a=-0.2, b=0.5, kappa=0.0)
    K = 6
    pop = build_population(K, 3, GAMMA_DIST, balanced=True)
    bundle = simulate_paths(grid, spec, market, 128, 3, agents=K)
    basis = RegressionBasis(degree=2, include_idio=False)
    g = terminal_g(LiabilitySpec.from_eqg(spec), bundle, pop.gammas)
    stats = gamma_hat(pop.gammas)
    mf = solve_mean_field(bundle, market, basis, g, pop.gammas, stats.gamma_hat,
                          max_iters=6, collect_fits=collect_fits)
    return grid, market, spec, pop, bundle, basis, mf


def test_agent_strategies_requires_stored_fits():
    grid, market, _, pop, bundle, basis, mf = _small_mf(collect_fits=False)
    w = fresh_idio_levels(3, bundle.n_paths, 4, grid)
    small = build_population(4, 7, GAMMA_DIST)
    with pytest.raises(MissingStageOutput):
        agent_strategies(mf, bundle, market, basis, small, w)


def test_agent_strategies_geometry():
    grid, market, _, pop, bundle, basis, mf = _small_mf(collect_fits=True)
    N = 5
    fresh = build_population(N, 7, GAMMA_DIST)
    w = fresh_idio_levels(3, bundle.n_paths, N, grid)
    p, pi = agent_strategies(mf, bundle, market, basis, fresh, w)
    assert p.shape == (128, N, 10, 2)
    assert pi.shape == (128, N, 10, 1)
    table = market.sigma_table(10)
    for k in (0, 4, 9):
        # p is built inside range(sigma^T); pi must reproduce it exactly
        assert np.allclose(pi[:, :, k] @ table[k], p[:, :, k], atol=1e-10)
        par, perp = project(table[k], p[:, :, k])
        assert np.max(np.abs(perp)) < 1e-10
    # the idio coordinate is outside the basis here: same-gamma agents
    # receive identical positions regardless of their own noise
    same = np.flatnonzero(fresh.gammas == fresh.gammas[0])
    if same.size > 1:
        i, j = same[:2]
        assert np.array_equal(p[:, i], p[:, j])


# ------------------------------------------------------------- replacement

def test_replacement_spec_condition_cap():
    Q = np.stack([np.eye(2), np.array([[1.0, 1.0], [1.0, 1.0]])])
    with pytest.raises(IllConditionedQ):
        ReplacementSpec(Q=Q).validate()
    ReplacementSpec(Q=np.stack([np.eye(2)] * 3)).validate()


def test_random_replacement_is_seeded_and_conditioned():
    a = random_replacement(21, 8, 2)
    b = random_replacement(21, 8, 2)
    c = random_replacement(22, 8, 2)
    assert np.array_equal(a.Q, b.Q)
    assert not np.array_equal(a.Q, c.Q)
    assert max(np.linalg.cond(a.Q[k]) for k in range(8)) <= 50.0


def test_replacement_invariance_exact_for_rotations():
    market = MarketSpec(n=2, d0=2, d=1, sigma=[[1.0, 0.2], [0.3, 0.9]],
                        lambda_lo=0.5, lambda_hi=1.5)
    grid = TimeGrid(0.5, 10)
    spec = EqgSpec(alpha=-0.5, beta=0.0, delta=(0.4, 0.1), x0=0.3,
                   a=0.0, b=0.0, kappa=0.0)
    bundle = simulate_paths(grid, spec, market, 64, 13)
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(10, 2))
    pi_tilde = rng.normal(size=(64, 10, 2))
    angles = rng.uniform(0, 2 * np.pi, size=10)
    Q = np.stack([np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
                  for t in angles])
    theta_disc, wealth_disc = replacement_invariance(
        market, mu, bundle, pi_tilde, ReplacementSpec(Q=Q))
    assert theta_disc < 1e-12
    assert wealth_disc < 1e-12


def test_replacement_invariance_random_q_and_pathwise_mu():
    market = MarketSpec(n=2, d0=2, d=1, sigma=[[1.0, 0.2], [0.3, 0.9]],
                        lambda_lo=0.5, lambda_hi=1.5)
    grid = TimeGrid(0.5, 10)
    spec = EqgSpec(alpha=-0.5, beta=0.0, delta=(0.4, 0.1), x0=0.3,
                   a=0.0, b=0.0, kappa=0.0)
    bundle = simulate_paths(grid, spec, market, 64, 13)
    rng = np.random.default_rng(1)
    mu = rng.normal(size=(64, 10, 2))
    pi_tilde = rng.normal(size=(64, 10, 2))
    rep = random_replacement(77, 10, 2)
    theta_disc, wealth_disc = replacement_invariance(market, mu, bundle, pi_tilde, rep)
    assert theta_disc < 1e-10
    assert wealth_disc < 1e-10
    with pytest.raises(ValueError):
        replacement_invariance(market, rng.normal(size=(3, 2)), bundle, pi_tilde, rep)


# ------------------------------------------------------------- full study

def test_run_clearing_study_smoke():
    grid = TimeGrid(0.5, 10)
    market = MarketSpec(n=1, d0=2, d=1, sigma=[[1.0, 0.2]],
                        lambda_lo=1.0, lambda_hi=1.1)
    spec = EqgSpec(alpha=-0.5, beta=0.1, delta=(0.4, 0.1), x0=0.3,
                   a=-0.2, b=0.5, kappa=0.0)
    basis = RegressionBasis(degree=2, include_idio=False)
    report, mf, pool = run_clearing_study(
        grid, market, spec, LiabilitySpec.from_eqg(spec), GAMMA_DIST,
        n_common=32, n_equilibrium=30, Ns=[4, 8, 16], seed=5,
        basis=basis, mf_iters=6, n_batches=4,
    )
    assert pool.size == 16
    assert len(report.eps) == 3
    assert all(e >= 0 for e in report.eps)
    assert all(s >= 0 for s in report.stderr)
    # only 3 sizes over 0.6 decades: the rate fit must not have been attached
    assert np.isnan(report.slope)
    assert report.bound_ok == []
    assert mf.diagnostics.z_bmo > 0
