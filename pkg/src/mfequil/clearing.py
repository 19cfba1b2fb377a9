"""N-agent market simulation against the mean-field risk premium.

A heterogeneous population of exponential-utility agents is drawn i.i.d.
(risk aversion and initial wealth from discrete atoms, idiosyncratic noise
fresh per agent) and every agent is pushed through the solution map fitted
on the equilibrium cloud: agent i's hedging demand is the per-step
regression prediction z0_hat evaluated at (x_t, I_t, w^i_t) in its own
risk-aversion stratum, and its optimal position is

    p^{i,*} = (z0_hat_par + theta^T) / gamma_i,
    pi^{i,*} = (sigma sigma^T)^{-1} sigma (p^{i,*})^T.

The clearing residual eps_N = E int_0^T |N^{-1} sum_i pi^{i,*}|^2 dt is
estimated by a left-endpoint rule with common-path batching for standard
errors; per-capita sums are evaluated in canonical (sorted) order so that
relabelling agents reproduces eps_N bit for bit.  rate_fit checks the
O(1/N) decay by a log-log slope and a Jensen-style bound diagnostic
N eps_N <= 4 (1 + gamma_hat^2 / gamma_lo^2) * (BMO proxy of the normalized
hedging integrands) * (1 + slack).

Portfolio replacement: left-multiplying (mu, sigma) by any well-conditioned
Q changes the securities but not the risk premium or attainable wealth;
replacement_invariance evaluates both identities numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IllConditionedQ, InsufficientSpan, MissingStageOutput
from .liabilities import LiabilitySpec, terminal_g
from .market import MarketSpec, gamma_hat, project, risk_premium_from_mu
from .meanfield import MeanFieldSolution, smallness_from_liability, solve_mean_field
from .paths import (
    KIND_AUX,
    KIND_GAMMA,
    KIND_XI,
    PathBundle,
    _philox,
    normal_block_array,
    simulate_paths,
)

KIND_REPLACE = 6   # uniform draws for replacement matrices, disjoint from path streams
from .regression import RegressionBasis, feature_columns
from .riccati import EqgSpec


@dataclass(frozen=True)
class DiscreteDist:
    """Finite-atom distribution (values strictly positive when used for gamma)."""

    values: tuple[float, ...]
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.probs is not None:
            if len(self.probs) != len(self.values):
                raise ValueError("probs must match values")
            if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
                raise ValueError("probs must be nonnegative and sum to 1")

    @property
    def p(self) -> np.ndarray:
        if self.probs is None:
            return np.full(len(self.values), 1.0 / len(self.values))
        return np.asarray(self.probs, dtype=float)

    def draw_ids(self, u: np.ndarray) -> np.ndarray:
        edges = np.cumsum(self.p)
        return np.minimum(np.searchsorted(edges, u, side="right"), len(self.values) - 1)

    def balanced_ids(self, n: int) -> np.ndarray:
        """Deterministic assignment with atom counts matching probs (largest
        remainder); removes sampling noise from the equilibrium cloud's
        risk-aversion mix."""
        quota = self.p * n
        counts = np.floor(quota).astype(int)
        short = n - counts.sum()
        if short > 0:
            order = np.argsort(-(quota - counts))
            counts[order[:short]] += 1
        return np.repeat(np.arange(len(self.values)), counts)


@dataclass
class Population:
    """Per-agent draws shared across common paths."""

    gammas: np.ndarray       # (N,)
    xis: np.ndarray          # (N,)
    atom_ids: np.ndarray     # (N,) index into the gamma atoms
    gamma_dist: DiscreteDist

    @property
    def size(self) -> int:
        return self.gammas.shape[0]


def build_population(
    n_agents: int,
    seed: int,
    gamma_dist: DiscreteDist,
    xi_dist: DiscreteDist | None = None,
    balanced: bool = False,
    stream: int = KIND_GAMMA,
) -> Population:
    """Draw (gamma_i, xi_i) for n_agents.

    balanced=True assigns gamma atoms in exact proportion instead of i.i.d.
    (used for the equilibrium cloud so the sample harmonic mean is the
    population one); agents entering clearing statistics use i.i.d. draws.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if balanced:
        ids = gamma_dist.balanced_ids(n_agents)
    else:
        u = _philox(seed, stream, 0).random(n_agents)
        ids = gamma_dist.draw_ids(u)
    gammas = np.asarray(gamma_dist.values, dtype=float)[ids]
    if xi_dist is None:
        xis = np.zeros(n_agents)
    else:
        ux = _philox(seed, KIND_XI, 0).random(n_agents)
        xis = np.asarray(xi_dist.values, dtype=float)[xi_dist.draw_ids(ux)]
    return Population(gammas=gammas, xis=xis, atom_ids=ids, gamma_dist=gamma_dist)


def fresh_idio_levels(seed: int, n_common: int, n_agents: int, grid, stream: int = KIND_AUX):
    """Idiosyncratic Brownian first components for evaluation agents,
    (M0, N, steps + 1) with level 0 at time 0."""
    steps, dt = grid.steps, grid.dt
    dw = normal_block_array(seed, stream, (n_common, n_agents, steps)) * np.sqrt(dt)
    w = np.zeros((n_common, n_agents, steps + 1))
    np.cumsum(dw, axis=2, out=w[:, :, 1:])
    return w


def agent_strategies(
    mf: MeanFieldSolution,
    bundle: PathBundle,
    market: MarketSpec,
    basis: RegressionBasis,
    population: Population,
    w_agents: np.ndarray,
    stratified: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal positions of fresh agents under the fitted solution map.

    Returns p (M0, N, steps, d0) in Brownian coordinates and pi
    (M0, N, steps, n) in security units.
    """
    if mf.solution.fits is None:
        raise MissingStageOutput(
            "mean-field solution was run without collect_fits; no per-step maps to evaluate"
        )
    grid = mf.solution.grid
    steps = grid.steps
    M0 = bundle.n_paths
    N = population.size
    d0, n = market.d0, market.n
    table = market.sigma_table(steps)
    if stratified:
        sids = np.tile(population.atom_ids.astype(np.int64), M0)
    else:
        sids = np.zeros(M0 * N, dtype=np.int64)

    p = np.empty((M0, N, steps, d0))
    pi = np.empty((M0, N, steps, n))
    inv_gamma = (1.0 / population.gammas)[None, :, None]
    for k in range(steps):
        xk = np.broadcast_to(bundle.x[:, k, None], (M0, N)).ravel()
        ik = np.broadcast_to(bundle.I[:, k, None], (M0, N)).ravel()
        wk = w_agents[:, :, k].ravel()
        raw = feature_columns(basis, xk, ik, wk)
        z_hat = mf.solution.fits[k][1].predict(raw, sids)[:, :d0].reshape(M0, N, d0)
        z_par, _ = project(table[k], z_hat)
        p[:, :, k, :] = (z_par + mf.theta[:, k, None, :]) * inv_gamma
        gram = table[k] @ table[k].T
        coef = np.linalg.solve(gram, table[k] @ p[:, :, k, :].reshape(-1, d0).T)
        pi[:, :, k, :] = coef.T.reshape(M0, N, n)
    return p, pi


@dataclass
class ClearingReport:
    """eps_N estimates over increasing N plus the rate and bound diagnostics."""

    Ns: list[int]
    eps: list[float]
    stderr: list[float]
    gamma_hat: float
    gamma_lo: float
    bmo_proxy: float
    slope: float = float("nan")
    intercept: float = float("nan")
    bound_const: float = float("nan")
    bound_ok: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.Ns, self.Ns[1:])):
            raise ValueError("Ns must be strictly increasing")
        if any(e < 0 for e in self.eps):
            raise ValueError("eps estimates must be nonnegative")


def clearing_residual(
    pi: np.ndarray,
    Ns: list[int],
    dt: float,
    n_batches: int = 20,
) -> tuple[list[float], list[float]]:
    """eps_N = E int |per-capita position|^2 dt for each N (prefix of the pool).

    The sum over agents runs in canonical sorted order per (path, step,
    security) slot, so any relabelling of the agents gives bit-identical
    estimates.  Standard errors come from batching common paths.
    """
    M0 = pi.shape[0]
    if M0 < 2:
        raise ValueError("need at least 2 common paths for standard errors")
    B = min(n_batches, M0)
    eps, ses = [], []
    for N in Ns:
        if N > pi.shape[1]:
            raise ValueError(f"N={N} exceeds agent pool {pi.shape[1]}")
        s = np.sort(pi[:, :N], axis=1).sum(axis=1) / N          # (M0, steps, n)
        integ = dt * np.sum(s * s, axis=(1, 2))                 # (M0,)
        eps.append(float(integ.mean()))
        splits = np.array_split(integ, B)
        bm = np.array([b.mean() for b in splits])
        ses.append(float(bm.std(ddof=1) / np.sqrt(B)))
    return eps, ses


def rate_fit(report: ClearingReport, slack: float = 0.25) -> ClearingReport:
    """OLS slope of log eps_N on log N plus the proof-bound diagnostic.

    Requires >= 4 population sizes spanning >= 1.5 decades.  bound_const is
    4 (1 + gamma_hat^2 / gamma_lo^2) * BMO proxy; bound_ok flags
    N eps_N <= bound_const (1 + slack) per N.
    """
    Ns = np.asarray(report.Ns, dtype=float)
    eps = np.asarray(report.eps, dtype=float)
    if Ns.size < 4:
        raise InsufficientSpan(f"need >= 4 population sizes, got {Ns.size}")
    decades = np.log10(Ns.max() / Ns.min())
    if decades < 1.5:
        raise InsufficientSpan(f"N span {decades:.2f} decades < 1.5")
    if np.any(eps <= 0):
        raise ValueError("log-log fit needs strictly positive eps")
    slope, intercept = np.polyfit(np.log(Ns), np.log(eps), 1)
    report.slope = float(slope)
    report.intercept = float(intercept)
    report.bound_const = 4.0 * (1.0 + report.gamma_hat**2 / report.gamma_lo**2) * report.bmo_proxy
    report.bound_ok = [
        bool(n * e <= report.bound_const * (1.0 + slack))
        for n, e in zip(report.Ns, report.eps)
    ]
    return report


def run_clearing_study(
    grid,
    market: MarketSpec,
    eqg: EqgSpec,
    liability: LiabilitySpec,
    gamma_dist: DiscreteDist,
    n_common: int,
    n_equilibrium: int,
    Ns: list[int],
    seed: int,
    basis: RegressionBasis,
    mf_iters: int = 10,
    mf_tol: float = 1e-4,
    xi_dist: DiscreteDist | None = None,
    n_batches: int = 20,
    slack: float = 0.25,
) -> tuple[ClearingReport, MeanFieldSolution, Population]:
    """End-to-end clearing experiment.

    Solves the mean-field equation on a balanced equilibrium cloud, draws a
    fresh i.i.d. agent pool of size max(Ns), evaluates every agent through
    the stored per-step solution maps, and estimates eps_N with its rate.
    The rate fit is attached only when Ns satisfies the span precondition.
    """
    cloud_pop = build_population(n_equilibrium, seed, gamma_dist, balanced=True)
    stats = gamma_hat(cloud_pop.gammas)
    stratified = liability.gamma_coupled
    bundle = simulate_paths(grid, eqg, market, n_common, seed, agents=n_equilibrium)
    g = terminal_g(liability, bundle, cloud_pop.gammas)
    sids = np.tile(cloud_pop.atom_ids.astype(np.int64), n_common) if stratified else None
    diag = smallness_from_liability(liability, eqg, grid, stats)
    mf = solve_mean_field(
        bundle, market, basis, g, cloud_pop.gammas, stats.gamma_hat,
        max_iters=mf_iters, tol=mf_tol,
        stratum_ids=sids, n_strata=len(gamma_dist.values) if stratified else 1,
        compute_stability=True, collect_fits=True, diagnostics=diag,
    )

    pool = build_population(max(Ns), seed, gamma_dist, xi_dist=xi_dist, balanced=False)
    w_agents = fresh_idio_levels(seed, n_common, pool.size, grid)
    _, pi = agent_strategies(mf, bundle, market, basis, pool, w_agents, stratified=stratified)
    eps, ses = clearing_residual(pi, Ns, grid.dt, n_batches=n_batches)
    report = ClearingReport(
        Ns=list(Ns), eps=eps, stderr=ses,
        gamma_hat=stats.gamma_hat, gamma_lo=stats.gamma_lo,
        bmo_proxy=mf.diagnostics.z_bmo,
    )
    if len(Ns) >= 4 and np.log10(max(Ns) / min(Ns)) >= 1.5:
        rate_fit(report, slack=slack)
    return report, mf, pool


@dataclass(frozen=True)
class ReplacementSpec:
    """Grid-indexed security replacement pi_tilde -> Q^T pi_tilde."""

    Q: np.ndarray            # (steps, n, n)
    cond_cap: float = 50.0

    def validate(self):
        for k in range(self.Q.shape[0]):
            c = np.linalg.cond(self.Q[k])
            if not np.isfinite(c) or c > self.cond_cap:
                raise IllConditionedQ(
                    f"Q at step {k} has condition number {c:.3g} > cap {self.cond_cap}"
                )
        return self


def random_replacement(
    seed: int,
    steps: int,
    n: int,
    spread: float = 0.3,
    cond_cap: float = 50.0,
    block: int = 0,
    max_tries: int = 200,
) -> ReplacementSpec:
    """Q_k = I + spread * U[-1,1]^{n x n}, redrawn until the condition cap holds."""
    rng = _philox(seed, KIND_REPLACE, block)
    Q = np.empty((steps, n, n))
    for k in range(steps):
        for _ in range(max_tries):
            cand = np.eye(n) + spread * (2.0 * rng.random((n, n)) - 1.0)
            if np.linalg.cond(cand) <= cond_cap:
                Q[k] = cand
                break
        else:
            raise IllConditionedQ(f"no well-conditioned draw in {max_tries} tries")
    return ReplacementSpec(Q=Q, cond_cap=cond_cap)


def replacement_invariance(
    market: MarketSpec,
    mu: np.ndarray,
    bundle: PathBundle,
    pi_tilde: np.ndarray,
    rep: ReplacementSpec,
) -> tuple[float, float]:
    """Sup discrepancies of the two replacement identities.

    theta identity: the market price of risk computed from (Q mu, Q sigma)
    equals the one from (mu, sigma).  Wealth identity: trading pi_tilde in
    the replaced securities equals trading Q^T pi_tilde in the originals,
    pathwise.  mu has shape (steps, n) or (M0, steps, n); pi_tilde has shape
    (M0, steps, n).
    """
    rep.validate()
    grid = bundle.grid
    steps, dt = grid.steps, grid.dt
    M0 = bundle.n_paths
    n = market.n
    table = market.sigma_table(steps)
    mu = np.asarray(mu, dtype=float)
    if mu.shape == (steps, n):
        mu_at = lambda k: np.broadcast_to(mu[k], (M0, n))
    elif mu.shape == (M0, steps, n):
        mu_at = lambda k: mu[:, k, :]
    else:
        raise ValueError(f"mu must be (steps, n) or (M0, steps, n); got {mu.shape}")

    theta_disc = 0.0
    w_orig = np.zeros((M0,))
    w_repl = np.zeros((M0,))
    wealth_disc = 0.0
    for k in range(steps):
        Qk = rep.Q[k]
        sig = table[k]
        mk = mu_at(k)
        th = risk_premium_from_mu(sig, mk)
        th_tilde = risk_premium_from_mu(Qk @ sig, mk @ Qk.T)
        theta_disc = max(theta_disc, float(np.max(np.abs(th_tilde - th))))

        drive = mk * dt + bundle.dW0[:, k, :] @ sig.T          # (M0, n)
        pt = pi_tilde[:, k, :]
        w_repl = w_repl + np.einsum("mj,mj->m", pt, drive @ Qk.T)
        w_orig = w_orig + np.einsum("mj,mj->m", pt @ Qk, drive)
        wealth_disc = max(wealth_disc, float(np.max(np.abs(w_repl - w_orig))))
    return theta_disc, wealth_disc
