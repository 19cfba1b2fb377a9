"""Mean-field BSDE solver on a common-path / particle cloud.

The equilibrium risk premium of a continuum of exponential-utility agents is
theta_t = -gamma_hat Ebar[Z0_par_t]^T, where Ebar averages the common-noise
integrand over the idiosyncratic randomness conditionally on the common path
and gamma_hat is the harmonic-mean risk aversion.  In normalized variables
(z = gamma Z, G = gamma F) each particle carries

    y_t = G + int_t^T ( gamma_hat z0_par Ebar_n^T - gamma_hat^2 |Ebar_n|^2 / 2
                        + (|z0_perp|^2 + |z1|^2) / 2 ) ds - int z dW,

with Ebar_n = Ebar[(1/gamma) z0_par], so that at a fixed point every particle
also solves the single-agent equation under theta = -gamma_hat Ebar_n^T.

The cloud discretises Ebar by the per-common-path average over the first
n_equilibrium particles; extra particles (used as clearing agents) see the
same driver but do not enter the average.  One application of the map
freezes the driver at its input (a single linear backward pass); the solver
iterates the map from z = 0 and records sup-norm contraction ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeSolution, _ClipCounter, _backward_pass, bmo_proxy
from .liabilities import LiabilitySpec, liability_bounds
from .market import MarketSpec, PopulationStats, project
from .paths import PathBundle
from .regression import BasisEngine, RegressionBasis
from .riccati import EqgSpec


@dataclass(frozen=True)
class CloudLayout:
    """M0 common paths, K particles each; the first n_equilibrium particles
    define the empirical mean field."""

    n_common: int
    n_particles: int
    n_equilibrium: int | None = None

    def __post_init__(self):
        if self.n_common < 1 or self.n_particles < 1:
            raise ValueError("cloud dimensions must be positive")
        n_eq = self.n_particles if self.n_equilibrium is None else self.n_equilibrium
        if not (1 <= n_eq <= self.n_particles):
            raise ValueError("n_equilibrium must be in [1, n_particles]")

    @property
    def n_eq(self) -> int:
        return self.n_particles if self.n_equilibrium is None else self.n_equilibrium


def cloud_mean(values: np.ndarray, n_eq: int | None = None) -> np.ndarray:
    """Mean over the particle axis (axis 1) of the first n_eq particles.

    Keeps the particle axis with size one so the result broadcasts straight
    back onto the cloud.
    """
    if n_eq is None:
        n_eq = values.shape[1]
    return values[:, :n_eq].mean(axis=1, keepdims=True)


@dataclass
class ContractionDiagnostics:
    """Smallness gates and the observed contraction of the fixed-point map."""

    f_inf: float
    f_cross_inf: float
    c_gamma: float
    c_gamma_spread: float
    radius: float                  # R = 2 ||F||_inf
    smallness_ok: bool             # ||F||_inf < 1 / (48 C_gamma)
    stability_ok: bool             # ||F||_inf <= 1 / (4 sqrt(2) c_gamma)
    ratios: list[float] = field(default_factory=list)
    changes: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    y_inf: float = float("nan")    # empirical sup |Y| (unnormalized)
    z_bmo: float = float("nan")    # empirical BMO proxy of (Z0, Z1)


def smallness_report(
    f_inf: float,
    stats: PopulationStats,
    f_cross_inf: float = 0.0,
    c_gamma_spread_override: float | None = None,
) -> ContractionDiagnostics:
    """Evaluate the contraction and stability gates for a liability bound."""
    c_spread = stats.c_gamma_spread(c_gamma_spread_override)
    return ContractionDiagnostics(
        f_inf=f_inf,
        f_cross_inf=f_cross_inf,
        c_gamma=stats.c_gamma,
        c_gamma_spread=c_spread,
        radius=2.0 * f_inf,
        smallness_ok=f_inf < 1.0 / (48.0 * c_spread),
        stability_ok=f_inf <= 1.0 / (4.0 * np.sqrt(2.0) * stats.c_gamma),
    )


def smallness_from_liability(
    liability: LiabilitySpec,
    spec: EqgSpec,
    grid,
    stats: PopulationStats,
    c_gamma_spread_override: float | None = None,
) -> ContractionDiagnostics:
    bounds = liability_bounds(liability, spec, grid, stats.gamma_lo)
    return smallness_report(
        bounds["f_inf"], stats, f_cross_inf=bounds["f_cross_inf"],
        c_gamma_spread_override=c_gamma_spread_override,
    )


def _ebar_path(z0: np.ndarray, gammas: np.ndarray, market: MarketSpec, n_eq: int) -> np.ndarray:
    """Ebar_n on every interval: (M0, steps, d0) cloud mean of (1/gamma) z0_par."""
    M0, K, steps, d0 = z0.shape
    table = market.sigma_table(steps)
    out = np.empty((M0, steps, d0))
    inv_gamma = (1.0 / gammas)[None, :n_eq, None]
    for k in range(steps):
        z_par, _ = project(table[k], z0[:, :n_eq, k, :])
        out[:, k, :] = np.mean(inv_gamma * z_par, axis=1)
    return out


def gamma_map(
    z0_in: np.ndarray,
    z1_in: np.ndarray,
    g_samples: np.ndarray,
    bundle: PathBundle,
    market: MarketSpec,
    engine,
    gammas: np.ndarray,
    gamma_hat: float,
    n_eq: int | None = None,
    clip: float = 50.0,
    collect_fits: bool = False,
):
    """One application of the mean-field map: linear backward pass with the
    driver frozen at the input (z0, z1) and its empirical mean field.

    Returns (y, z0, z1, ebar, fits, clip_count).
    """
    grid = bundle.grid
    steps, dt = grid.steps, grid.dt
    M0, K = bundle.n_paths, bundle.n_agents
    g = np.asarray(g_samples, dtype=float).reshape(M0, K)
    if n_eq is None:
        n_eq = K
    table = market.sigma_table(steps)
    clipper = _ClipCounter(clip)

    gam = np.asarray(gammas, dtype=float)
    inv_gamma_eq = (1.0 / gam)[None, :n_eq, None]

    ebar = np.empty((M0, steps, market.d0))

    def driver(k):
        z0k = clipper.clip(z0_in[:, :, k, :])
        z1k = clipper.clip(z1_in[:, :, k, :])
        z0_par, z0_perp = project(table[k], z0k)
        eb = np.mean(inv_gamma_eq * z0_par[:, :n_eq, :], axis=1)   # (M0, d0)
        ebar[:, k, :] = eb
        f = (
            gamma_hat * np.einsum("mkj,mj->mk", z0_par, eb)
            - 0.5 * gamma_hat**2 * np.sum(eb**2, axis=1)[:, None]
            + 0.5 * (np.sum(z0_perp**2, axis=2) + np.sum(z1k**2, axis=2))
        )
        return f, 0.0

    y, z0, z1, fits = _backward_pass(
        engine, g, bundle.dW0, bundle.dWi, dt, driver, collect_fits=collect_fits,
    )
    return y, z0, z1, ebar, (fits if collect_fits else None), clipper.count


@dataclass
class MeanFieldSolution:
    """Converged cloud solution with the implied equilibrium risk premium."""

    solution: BsdeSolution
    theta: np.ndarray          # (M0, steps, d0)
    ebar: np.ndarray           # (M0, steps, d0) mean of (1/gamma) z0_par
    gammas: np.ndarray         # (K,)
    gamma_hat: float
    n_eq: int
    diagnostics: ContractionDiagnostics


def theta_from_solution(
    z0: np.ndarray,
    gammas: np.ndarray,
    gamma_hat: float,
    market: MarketSpec,
    n_eq: int | None = None,
) -> np.ndarray:
    """theta = -gamma_hat Ebar[(1/gamma) z0_par]^T, one row per common path/step."""
    if n_eq is None:
        n_eq = z0.shape[1]
    return -gamma_hat * _ebar_path(z0, np.asarray(gammas, dtype=float), market, n_eq)


def solve_mean_field(
    bundle: PathBundle,
    market: MarketSpec,
    basis: RegressionBasis,
    g_samples: np.ndarray,
    gammas: np.ndarray,
    gamma_hat: float,
    n_eq: int | None = None,
    max_iters: int = 10,
    tol: float = 1e-4,
    clip: float = 50.0,
    engine=None,
    stratum_ids: np.ndarray | None = None,
    n_strata: int = 1,
    diagnostics: ContractionDiagnostics | None = None,
    compute_stability: bool = False,
    collect_fits: bool = False,
) -> MeanFieldSolution:
    """Fixed-point iteration of the mean-field map from z = 0.

    Convergence metric: max of the relative sup change of the initial value
    and the relative cloud-L2 change of z, floored at 1e-8 scale.  On a
    non-contracting run the best (last) iterate is returned with
    converged = False rather than raising.
    """
    grid = bundle.grid
    steps, dt = grid.steps, grid.dt
    M0, K = bundle.n_paths, bundle.n_agents
    gam = np.asarray(gammas, dtype=float)
    if n_eq is None:
        n_eq = K
    if engine is None:
        engine = BasisEngine(bundle.x, bundle.I, bundle.wi_first, basis,
                             stratum_ids=stratum_ids, n_strata=n_strata)
    if diagnostics is None:
        diagnostics = smallness_report(float("nan"), _default_stats(gam))

    z0 = np.zeros((M0, K, steps, market.d0))
    z1 = np.zeros((M0, K, steps, market.d))
    y_prev = None
    changes: list[float] = []
    clip_total = 0
    converged = False
    fits = None
    y = None
    for it in range(max_iters):
        want_fits = collect_fits
        y, z0_new, z1_new, ebar, fits_it, nclip = gamma_map(
            z0, z1, g_samples, bundle, market, engine, gam, gamma_hat,
            n_eq=n_eq, clip=clip, collect_fits=want_fits,
        )
        clip_total += nclip
        if fits_it is not None:
            fits = fits_it
        if y_prev is not None:
            y0_scale = max(float(np.max(np.abs(y[:, :, 0]))), 1e-8)
            dy0 = float(np.max(np.abs(y[:, :, 0] - y_prev[:, :, 0]))) / y0_scale
            z_scale = max(
                np.sqrt((np.sum(z0_new**2) + np.sum(z1_new**2)) / (M0 * K * steps)), 1e-8
            )
            dz = np.sqrt(
                (np.sum((z0_new - z0) ** 2) + np.sum((z1_new - z1) ** 2)) / (M0 * K * steps)
            ) / z_scale
            changes.append(max(dy0, dz))
        y_prev = y
        z0, z1 = z0_new, z1_new
        if changes and changes[-1] < tol:
            converged = True
            break

    diagnostics.changes = changes
    diagnostics.ratios = [
        changes[i] / changes[i - 1] for i in range(1, len(changes)) if changes[i - 1] > 0
    ]
    diagnostics.iterations = len(changes) + 1
    diagnostics.converged = converged

    sol = BsdeSolution(
        grid=grid, market=market, y=y, z0=z0, z1=z1,
        picard_iters=diagnostics.iterations, converged=converged,
        clip_count=clip_total, y0_changes=changes, z_changes=changes,
        fits=fits,
    )
    # recompute the mean field from the final iterate so the reported theta
    # is the one the returned (y, z) actually solve
    ebar = _ebar_path(z0, gam, market, n_eq)
    theta = -gamma_hat * ebar
    if compute_stability:
        inv_g = (1.0 / gam)[None, :, None]
        diagnostics.y_inf = float(np.max(np.abs(sol.y[:, :, :] / gam[None, :, None])))
        diagnostics.z_bmo = bmo_proxy(
            z0 * inv_g[..., None], z1 * inv_g[..., None], dt, engine
        )
    return MeanFieldSolution(
        solution=sol, theta=theta, ebar=ebar, gammas=gam,
        gamma_hat=gamma_hat, n_eq=n_eq, diagnostics=diagnostics,
    )


def _default_stats(gammas: np.ndarray) -> PopulationStats:
    from .market import gamma_hat as _gh
    return _gh(gammas)
