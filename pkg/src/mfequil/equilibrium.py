"""Closed-form equilibrium quantities for the exponential-quadratic model.

With the additive liability split G = G0 + G1 (common quadratic cost plus an
idiosyncratic Gaussian leg), the normalized common value process is

    y0_t = A(t) x_t^2 + B(t) x_t + C(t) + I_t,
    z0_t = (2 A(t) x_t + B(t)) delta,

the idiosyncratic leg has the Cole-Hopf form

    y1_t = kappa (W^i_t)_1 + kappa^2 (T - t) / 2,   z1_t = kappa e_1,

and the market clears at the risk premium

    theta_t = -(2 A(t) x_t + B(t)) (Pi_t delta)^T,   mu_t = sigma_t theta_t,

where Pi_t projects onto the row space of sigma_t.  Every agent's optimal
stock position is then exactly zero, which is what "the market clears" means
here: the per-capita excess demand vanishes agent by agent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import MarketSpec, TimeGrid, excess_return_from_theta, project
from .paths import PathBundle
from .riccati import EqgSpec, RiccatiSolution


@dataclass
class EquilibriumPath:
    """Pathwise closed-form solution sampled on bundle paths.

    y0: (M, steps + 1); z0: (M, steps + 1, d0); theta: (M, steps, d0);
    mu: (M, steps, n).  y1/z1 are present when kappa != 0: y1 has shape
    (M, K, steps + 1) and z1 is the constant (d,) loading.
    """

    grid: TimeGrid
    y0: np.ndarray
    z0: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    y1: np.ndarray | None = None
    z1: np.ndarray | None = None

    def y0_initial(self) -> float:
        return float(self.y0[0, 0])


def equilibrium_path(
    ric: RiccatiSolution,
    bundle: PathBundle,
    market: MarketSpec,
    spec: EqgSpec,
) -> EquilibriumPath:
    """Evaluate the closed-form (y0, z0, theta, mu) on simulated paths."""
    grid = bundle.grid
    steps = grid.steps
    x = bundle.x
    A, B, C = ric.A, ric.B, ric.C
    delta = spec.delta_vec

    slope = 2.0 * A[None, :] * x + B[None, :]          # (M, steps + 1)
    y0 = A[None, :] * x * x + B[None, :] * x + C[None, :] + bundle.I
    z0 = slope[:, :, None] * delta[None, None, :]       # (M, steps + 1, d0)

    sig_table = market.sigma_table(steps)
    theta = np.empty((bundle.n_paths, steps, market.d0))
    mu = np.empty((bundle.n_paths, steps, market.n))
    for k in range(steps):
        dpar, _ = project(sig_table[k], delta)
        theta[:, k, :] = -slope[:, k, None] * dpar[None, :]
        mu[:, k, :] = excess_return_from_theta(sig_table[k], theta[:, k, :])

    y1 = z1 = None
    if spec.kappa != 0.0:
        y1, z1 = cole_hopf_idio(spec.kappa, grid, bundle)
    return EquilibriumPath(grid=grid, y0=y0, z0=z0, theta=theta, mu=mu, y1=y1, z1=z1)


def cole_hopf_idio(kappa: float, grid: TimeGrid, bundle: PathBundle):
    """Idiosyncratic value leg for the terminal liability kappa (W^i_T)_1.

    log E[exp(kappa W_T) | F_t] = kappa W_t + kappa^2 (T - t) / 2 for a
    Brownian coordinate W; the integrand z1 = kappa e_1 is constant.
    """
    tail = 0.5 * kappa * kappa * (grid.horizon - grid.times)
    y1 = kappa * bundle.wi_first + tail[None, None, :]
    d = bundle.dWi.shape[3]
    z1 = np.zeros(d)
    z1[0] = kappa
    return y1, z1


def sign_law_violations(eq: EquilibriumPath, market: MarketSpec) -> int:
    """Count grid cells where sign(mu^(k)) != -sign(sigma^(k) z0^T).

    In equilibrium an asset's excess return is positive exactly when its
    volatility row is negatively aligned with the common hedging integrand.
    """
    steps = eq.grid.steps
    sig_table = market.sigma_table(steps)
    bad = 0
    for k in range(steps):
        rhs = eq.z0[:, k, :] @ sig_table[k].T
        bad += int(np.sum(np.sign(eq.mu[:, k, :]) != -np.sign(rhs)))
    return bad


def martingale_check(eq: EquilibriumPath) -> tuple[float, float]:
    """z-score and standard error of E[exp(y0_T - y0_0)] - 1.

    exp(y0) must be a martingale: y0_T - y0_0 collapses to the simulated
    G0 minus its conditional log-moment at time zero.
    """
    growth = np.exp(eq.y0[:, -1] - eq.y0[:, 0])
    m = float(np.mean(growth))
    se = float(np.std(growth, ddof=1) / np.sqrt(growth.size))
    return (m - 1.0) / se, se


def fubini_malliavin_check(bundle: PathBundle, spec: EqgSpec) -> float:
    """Max pathwise gap between two representations of the same integral.

    For a = 0 the stochastic integral of B(t, T) against dW0 equals the time
    integral of b times the stochastic convolution int_0^t e^{alpha (t-s)}
    delta dW0_s.  Both sides are discretised with left-endpoint sums on the
    bundle grid; the gap is pure discretisation error and must vanish under
    grid refinement of a fixed Brownian path.
    """
    if spec.a != 0.0:
        raise ValueError("the swap identity is only used in the a = 0 model")
    grid = bundle.grid
    steps, dt = grid.steps, grid.dt
    T = grid.horizon
    times = grid.times
    if abs(spec.alpha) < 1e-14:
        B = spec.b * (T - times)
    else:
        B = (spec.b / spec.alpha) * (np.exp(spec.alpha * (T - times)) - 1.0)

    ddw = bundle.dW0 @ spec.delta_vec          # (M, steps)
    lhs = ddw @ B[:-1]

    decay = np.exp(spec.alpha * dt)
    inner = np.zeros(bundle.n_paths)
    rhs = np.zeros(bundle.n_paths)
    for k in range(steps):
        rhs += inner * dt
        inner = decay * (inner + ddw[:, k])
    rhs *= spec.b
    return float(np.max(np.abs(lhs - rhs)))
