"""Regression Monte Carlo for the quadratic-growth utility BSDE.

The normalized value process of an exponential-utility agent facing a given
risk premium theta solves

    y_t = G + int_t^T f(s, z0, z1) ds - int z0 dW0 - int z1 dW1,
    f = -z0_par theta - |theta|^2 / 2 + (|z0_perp|^2 + |z1|^2) / 2,

where z0_par is the row-space component of z0.  The solver runs backward
induction on simulated paths: z is estimated by regressing the centred
product of the next-step value with the Brownian increment, y by regressing
the next-step value plus the frozen driver, and an outer Picard loop
re-freezes the quadratic driver at the latest z until the initial value
stabilises.  The same backward pass, with importance weights and theta-
shifted increments, solves the measure-changed form whose driver drops the
-z0_par theta term.

Verification is the optimality-of-martingale test: along the candidate
optimum p*, the process R^p = -exp(-gamma (W^p - Y)) must be a martingale,
and a strict supermartingale along any perturbed strategy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import PicardDiverged, WeightDegenerate
from .market import MarketSpec, TimeGrid, project
from .paths import PathBundle
from .regression import BasisEngine, RegressionBasis, StepFit


def cole_hopf_oracle(g_samples: np.ndarray) -> float:
    """log E[exp(G)] by a max-shifted log-sum-exp over terminal samples."""
    g = np.asarray(g_samples, dtype=float).ravel()
    m = float(np.max(g))
    return m + float(np.log(np.mean(np.exp(g - m))))


class _ClipCounter:
    def __init__(self, bound: float):
        self.bound = float(bound)
        self.count = 0

    def clip(self, z: np.ndarray) -> np.ndarray:
        over = np.abs(z) > self.bound
        n = int(np.sum(over))
        if n:
            self.count += n
            return np.clip(z, -self.bound, self.bound)
        return z


@dataclass
class BsdeSolution:
    """Backward-induction output on a particle cloud of shape (M0, K).

    y is stored on nodes, z on intervals.  z0_par / z0_perp are the row-space
    split of z0 under the (piecewise constant) market volatility, computed
    lazily because the split doubles the memory footprint.
    """

    grid: TimeGrid
    market: MarketSpec
    y: np.ndarray            # (M0, K, steps + 1)
    z0: np.ndarray           # (M0, K, steps, d0)
    z1: np.ndarray           # (M0, K, steps, d)
    picard_iters: int
    converged: bool
    clip_count: int
    y0_changes: list[float] = field(default_factory=list)
    z_changes: list[float] = field(default_factory=list)
    fits: list[StepFit] | None = None

    @property
    def layout(self) -> tuple[int, int]:
        return self.y.shape[0], self.y.shape[1]

    @property
    def y0(self) -> float:
        """Initial value (identical across particles up to regression noise)."""
        return float(np.mean(self.y[:, :, 0]))

    @cached_property
    def z0_par(self) -> np.ndarray:
        out = np.empty_like(self.z0)
        table = self.market.sigma_table(self.grid.steps)
        for k in range(self.grid.steps):
            out[:, :, k, :], _ = project(table[k], self.z0[:, :, k, :])
        return out

    @cached_property
    def z0_perp(self) -> np.ndarray:
        return self.z0 - self.z0_par


def _as_theta_at(theta: np.ndarray, steps: int, d0: int, n_paths: int):
    """Normalise theta input to a per-step (M0, d0) accessor plus a flag."""
    th = np.asarray(theta, dtype=float)
    if th.shape == (steps, d0):
        return (lambda k: np.broadcast_to(th[k], (n_paths, d0))), True, th
    if th.shape == (n_paths, steps, d0):
        return (lambda k: th[:, k, :]), False, th
    raise ValueError(
        f"theta must have shape ({steps}, {d0}) or ({n_paths}, {steps}, {d0}); got {th.shape}"
    )


def _backward_pass(
    engine,
    g: np.ndarray,
    dW0: np.ndarray,
    dWi: np.ndarray,
    dt: float,
    driver,
    dw0_shift=None,
    weights_at=None,
    collect_fits: bool = False,
):
    """One linear backward sweep with the driver frozen at its inputs.

    driver(k) -> (pathwise (M0, K) array, deterministic scalar); both are
    added to the continuation value, the scalar outside the regression.
    Returns y on nodes, (z0, z1) on intervals, and the per-step fit maps.
    """
    M0, K = g.shape
    steps = dW0.shape[1]
    d0 = dW0.shape[2]
    d = dWi.shape[3]
    P = M0 * K

    y = np.empty((M0, K, steps + 1))
    y[:, :, steps] = g
    z0 = np.empty((M0, K, steps, d0))
    z1 = np.empty((M0, K, steps, d))
    fits: list[StepFit | None] = [None] * steps

    for k in range(steps - 1, -1, -1):
        w = weights_at(k) if weights_at is not None else None
        cond = engine.at(k, weights=w)
        y_next = y[:, :, k + 1]
        f_path, f_det = driver(k)

        stage1 = np.empty((P, 2))
        stage1[:, 0] = y_next.reshape(P)
        stage1[:, 1] = f_path.reshape(P)
        fitted1, fit_a = cond.fit(stage1)
        y_fit = fitted1[:, 0]

        resid = y_next.reshape(P) - y_fit
        dw0_k = dW0[:, k, :]
        if dw0_shift is not None:
            dw0_k = dw0_k + dw0_shift(k)
        prods = np.empty((P, d0 + d))
        prods[:, :d0] = (
            resid.reshape(M0, K, 1) * dw0_k[:, None, :]
        ).reshape(P, d0) / dt
        prods[:, d0:] = (resid.reshape(M0, K)[:, :, None] * dWi[:, :, k, :]).reshape(P, d) / dt
        fitted2, fit_b = cond.fit(prods)

        z0[:, :, k, :] = fitted2[:, :d0].reshape(M0, K, d0)
        z1[:, :, k, :] = fitted2[:, d0:].reshape(M0, K, d)
        y[:, :, k] = (y_fit + dt * fitted1[:, 1]).reshape(M0, K) + dt * f_det
        if collect_fits:
            fits[k] = (fit_a, fit_b)
    return y, z0, z1, fits


def _picard_loop(
    engine,
    g,
    dW0,
    dWi,
    dt,
    make_driver,
    d0,
    d,
    max_iters,
    tol,
    dw0_shift=None,
    weights_at=None,
    collect_fits=False,
):
    """Outer fixed-point iteration over the frozen-driver backward pass."""
    M0, K = g.shape
    steps = dW0.shape[1]
    z0_prev = np.zeros((M0, K, steps, d0))
    z1_prev = np.zeros((M0, K, steps, d))
    y0_prev = None
    y0_changes: list[float] = []
    z_changes: list[float] = []
    grow_streak = 0
    converged = False
    result = None

    for it in range(max_iters):
        driver = make_driver(z0_prev, z1_prev)
        want_fits = collect_fits
        y, z0, z1, fits = _backward_pass(
            engine, g, dW0, dWi, dt, driver,
            dw0_shift=dw0_shift, weights_at=weights_at, collect_fits=want_fits,
        )
        y0 = y[:, :, 0]
        if y0_prev is None:
            change = np.inf
        else:
            change = float(np.max(np.abs(y0 - y0_prev)))
            scale = max(float(np.max(np.abs(y0))), 1e-8)
            dz = np.sqrt(
                (np.sum((z0 - z0_prev) ** 2) + np.sum((z1 - z1_prev) ** 2))
                / (M0 * K * steps)
            )
            zs = np.sqrt((np.sum(z0**2) + np.sum(z1**2)) / (M0 * K * steps))
            y0_changes.append(change / scale)
            z_changes.append(dz / max(zs, 1e-8))
        result = (y, z0, z1, fits)
        if y0_prev is not None:
            if len(y0_changes) >= 2 and y0_changes[-1] > y0_changes[-2]:
                grow_streak += 1
                if grow_streak >= 3:
                    raise PicardDiverged(
                        f"y0 change grew for 3 consecutive iterations: {y0_changes[-4:]}"
                    )
            else:
                grow_streak = 0
            if change <= tol * max(float(np.max(np.abs(y0))), 1e-8):
                converged = True
                y0_prev = y0
                z0_prev, z1_prev = z0, z1
                break
        y0_prev = y0
        z0_prev, z1_prev = z0, z1
    iters = len(y0_changes) + 1
    return result, iters, converged, y0_changes, z_changes


def solve_agent_bsde(
    bundle: PathBundle,
    market: MarketSpec,
    basis: RegressionBasis,
    theta: np.ndarray,
    g_samples: np.ndarray,
    picard_max: int = 20,
    picard_tol: float = 1e-4,
    clip: float = 50.0,
    stratum_ids: np.ndarray | None = None,
    n_strata: int = 1,
    collect_fits: bool = False,
) -> BsdeSolution:
    """Solve the normalized utility BSDE for an exogenous risk premium."""
    grid = bundle.grid
    steps, dt = grid.steps, grid.dt
    M0, K = bundle.n_paths, bundle.n_agents
    d0, d = market.d0, market.d
    g = np.asarray(g_samples, dtype=float).reshape(M0, K)
    theta_at, theta_det, _ = _as_theta_at(theta, steps, d0, M0)
    sig_table = market.sigma_table(steps)
    engine = BasisEngine(bundle.x, bundle.I, bundle.wi_first, basis,
                         stratum_ids=stratum_ids, n_strata=n_strata)
    clipper = _ClipCounter(clip)

    def make_driver(z0_prev, z1_prev):
        def driver(k):
            th = theta_at(k)                       # (M0, d0)
            z0k = clipper.clip(z0_prev[:, :, k, :])
            z1k = clipper.clip(z1_prev[:, :, k, :])
            z0_par, z0_perp = project(sig_table[k], z0k)
            f = (
                -np.einsum("mkj,mj->mk", z0_par, th)
                + 0.5 * (np.sum(z0_perp**2, axis=2) + np.sum(z1k**2, axis=2))
            )
            if theta_det:
                det = -0.5 * float(np.sum(th[0] ** 2))
            else:
                f = f - 0.5 * np.sum(th**2, axis=1)[:, None]
                det = 0.0
            return f, det
        return driver

    (y, z0, z1, fits), iters, converged, ych, zch = _picard_loop(
        engine, g, bundle.dW0, bundle.dWi, dt, make_driver, d0, d,
        picard_max, picard_tol, collect_fits=collect_fits,
    )
    return BsdeSolution(
        grid=grid, market=market, y=y, z0=z0, z1=z1,
        picard_iters=iters, converged=converged, clip_count=clipper.count,
        y0_changes=ych, z_changes=zch, fits=fits if collect_fits else None,
    )


def doleans_weights(theta: np.ndarray, bundle: PathBundle) -> np.ndarray:
    """Cumulative stochastic-exponential weights of -int theta^T dW0.

    Returns (M0, steps + 1) with D_0 = 1; D_T is the density of the measure
    under which W0 + int theta dt is Brownian.
    """
    grid = bundle.grid
    steps, dt = grid.steps, grid.dt
    M0 = bundle.n_paths
    d0 = bundle.dW0.shape[2]
    theta_at, _, _ = _as_theta_at(theta, steps, d0, M0)
    D = np.empty((M0, steps + 1))
    D[:, 0] = 1.0
    for k in range(steps):
        th = theta_at(k)
        expo = -np.einsum("mj,mj->m", th, bundle.dW0[:, k, :]) - 0.5 * dt * np.sum(th**2, axis=1)
        D[:, k + 1] = D[:, k] * np.exp(expo)
    return D


def solve_under_q(
    bundle: PathBundle,
    market: MarketSpec,
    basis: RegressionBasis,
    theta: np.ndarray,
    g_samples: np.ndarray,
    picard_max: int = 20,
    picard_tol: float = 1e-4,
    clip: float = 50.0,
    stratum_ids: np.ndarray | None = None,
    n_strata: int = 1,
) -> tuple[BsdeSolution, float]:
    """Solve the measure-changed BSDE on theta-shifted increments.

    Conditional expectations under the tilted measure are weighted
    regressions with the cumulative stochastic-exponential weights; the
    driver loses its -z0_par theta term.  Returns the solution and the
    effective sample size of the terminal weights.
    """
    grid = bundle.grid
    steps, dt = grid.steps, grid.dt
    M0, K = bundle.n_paths, bundle.n_agents
    d0, d = market.d0, market.d
    g = np.asarray(g_samples, dtype=float).reshape(M0, K)
    theta_at, theta_det, _ = _as_theta_at(theta, steps, d0, M0)
    sig_table = market.sigma_table(steps)

    D = doleans_weights(theta, bundle)
    wT = D[:, -1]
    ess = float(wT.sum() ** 2 / np.sum(wT**2))
    if ess < M0 / 100.0:
        raise WeightDegenerate(
            f"effective sample size {ess:.1f} below {M0 / 100:.1f}: "
            "the risk premium is too large for this measure change"
        )

    engine = BasisEngine(bundle.x, bundle.I, bundle.wi_first, basis,
                         stratum_ids=stratum_ids, n_strata=n_strata)
    clipper = _ClipCounter(clip)

    def weights_at(k):
        return np.broadcast_to(D[:, k + 1][:, None], (M0, K)).reshape(M0 * K)

    def dw0_shift(k):
        return theta_at(k) * dt

    def make_driver(z0_prev, z1_prev):
        def driver(k):
            th = theta_at(k)
            z0k = clipper.clip(z0_prev[:, :, k, :])
            z1k = clipper.clip(z1_prev[:, :, k, :])
            _, z0_perp = project(sig_table[k], z0k)
            f = 0.5 * (np.sum(z0_perp**2, axis=2) + np.sum(z1k**2, axis=2))
            if theta_det:
                det = -0.5 * float(np.sum(th[0] ** 2))
            else:
                f = f - 0.5 * np.sum(th**2, axis=1)[:, None]
                det = 0.0
            return f, det
        return driver

    (y, z0, z1, fits), iters, converged, ych, zch = _picard_loop(
        engine, g, bundle.dW0, bundle.dWi, dt, make_driver, d0, d,
        picard_max, picard_tol, dw0_shift=dw0_shift, weights_at=weights_at,
    )
    sol = BsdeSolution(
        grid=grid, market=market, y=y, z0=z0, z1=z1,
        picard_iters=iters, converged=converged, clip_count=clipper.count,
        y0_changes=ych, z_changes=zch,
    )
    return sol, ess


def optimal_strategy(
    solution: BsdeSolution,
    theta: np.ndarray,
    gamma: float,
    market: MarketSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate optimum: gamma p* = z0_par + theta^T, pi* = (sigma sigma^T)^{-1} sigma p*^T.

    Returns p (M0, K, steps, d0) and pi (M0, K, steps, n).
    """
    grid = solution.grid
    steps = grid.steps
    M0, K = solution.layout
    d0 = market.d0
    theta_at, _, _ = _as_theta_at(theta, steps, d0, M0)
    table = market.sigma_table(steps)
    p = np.empty((M0, K, steps, d0))
    pi = np.empty((M0, K, steps, market.n))
    z0_par = solution.z0_par
    for k in range(steps):
        p[:, :, k, :] = (z0_par[:, :, k, :] + theta_at(k)[:, None, :]) / gamma
        gram = table[k] @ table[k].T
        coef = np.linalg.solve(gram, table[k] @ p[:, :, k, :].reshape(-1, d0).T)
        pi[:, :, k, :] = coef.T.reshape(M0, K, market.n)
    return p, pi


@dataclass(frozen=True)
class Perturbation:
    """Strategy perturbation p = scale * p_star + offset (offset row-projected)."""

    label: str
    scale: float = 1.0
    offset: tuple[float, ...] | None = None


@dataclass
class VerificationReport:
    """Martingale diagnostics for R^p along the candidate optimum and perturbations."""

    aggregate_z: float
    max_step_z: float
    utility_star: float
    perturbed: list[dict]

    @property
    def all_perturbations_suboptimal(self) -> bool:
        return all(
            row["drift_z"] > 2.0 and row["utility_gap"] <= 2.0 * row["utility_gap_se"]
            for row in self.perturbed
        )


def _wealth_paths(p: np.ndarray, bundle: PathBundle, theta_at, dt: float, xi: float):
    """W_{k+1} = W_k + p_k (dW0_k + theta_k dt) for p of shape (M0, K, steps, d0)."""
    M0, K, steps, _ = p.shape
    W = np.empty((M0, K, steps + 1))
    W[:, :, 0] = xi
    for k in range(steps):
        drive = bundle.dW0[:, k, :] + theta_at(k) * dt
        W[:, :, k + 1] = W[:, :, k] + np.einsum("mkj,mj->mk", p[:, :, k, :], drive)
    return W


def verify_condition_r(
    solution: BsdeSolution,
    bundle: PathBundle,
    market: MarketSpec,
    theta: np.ndarray,
    gamma: float,
    g_samples: np.ndarray,
    perturbations: list[Perturbation] | None = None,
    xi: float = 0.0,
) -> VerificationReport:
    """Drift test of R^p = -exp(-gamma (W^p - Y)) along p* and perturbations.

    Along p* the per-step and aggregate drifts must be statistically zero;
    along every perturbation the aggregate drift must be significantly
    negative and the terminal utility lower, the quadratic penalty
    (gamma^2/2)|p - p*|^2 being the mechanism.
    """
    grid = solution.grid
    steps, dt = grid.steps, grid.dt
    M0, K = solution.layout
    d0 = market.d0
    theta_at, _, _ = _as_theta_at(theta, steps, d0, M0)
    table = market.sigma_table(steps)
    if perturbations is None:
        perturbations = [
            Perturbation("offset+0.5e1", 1.0, tuple([0.5] + [0.0] * (d0 - 1))),
            Perturbation("scale x2", 2.0, None),
        ]

    p_star, _ = optimal_strategy(solution, theta, gamma, market)
    Y = solution.y / gamma
    F = np.asarray(g_samples, dtype=float).reshape(M0, K) / gamma

    def drift_stats(p):
        W = _wealth_paths(p, bundle, theta_at, dt, xi)
        R = -np.exp(-gamma * (W - Y))
        dR = np.diff(R, axis=2)
        flat = dR.reshape(-1, steps)
        step_mean = flat.mean(axis=0)
        step_se = flat.std(axis=0, ddof=1) / np.sqrt(flat.shape[0])
        step_z = step_mean / step_se
        total = (R[:, :, -1] - R[:, :, 0]).ravel()
        agg_z = float(total.mean() / (total.std(ddof=1) / np.sqrt(total.size)))
        utility = -np.exp(-gamma * (W[:, :, -1] - F))
        return agg_z, float(np.max(np.abs(step_z))), utility.ravel(), W

    agg_z, max_step_z, u_star, _ = drift_stats(p_star)

    rows = []
    for pert in perturbations:
        p = pert.scale * p_star
        if pert.offset is not None:
            off = np.asarray(pert.offset, dtype=float)
            for k in range(steps):
                off_par, _ = project(table[k], off)
                p[:, :, k, :] += off_par[None, None, :]
        z, _, u, _ = drift_stats(p)
        gap = u.mean() - u_star.mean()
        gap_se = float((u - u_star).std(ddof=1) / np.sqrt(u.size))
        rows.append(
            {
                "label": pert.label,
                "drift_z": -z,
                "utility": float(u.mean()),
                "utility_gap": float(gap),
                "utility_gap_se": gap_se,
            }
        )
    return VerificationReport(
        aggregate_z=agg_z,
        max_step_z=max_step_z,
        utility_star=float(u_star.mean()),
        perturbed=rows,
    )


def bmo_proxy(
    z0: np.ndarray,
    z1: np.ndarray,
    dt: float,
    engine,
    quantile: float = 1.0,
) -> float:
    """Regression estimate of sup_t E[ int_t^T |z|^2 ds | F_t ].

    Fits the remaining quadratic variation on the state basis at every step
    and takes the max fitted value (or a high quantile for robustness).
    """
    M0, K, steps = z0.shape[0], z0.shape[1], z0.shape[2]
    qv = (np.sum(z0**2, axis=3) + np.sum(z1**2, axis=3)) * dt   # (M0, K, steps)
    remaining = np.cumsum(qv[:, :, ::-1], axis=2)[:, :, ::-1]
    out = 0.0
    for k in range(steps):
        cond = engine.at(k)
        fitted, _ = cond.fit(remaining[:, :, k].reshape(M0 * K))
        val = float(np.quantile(fitted, quantile)) if quantile < 1.0 else float(np.max(fitted))
        out = max(out, val)
    return out
