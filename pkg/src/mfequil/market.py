"""Market primitives: time grid, volatility structure, projection geometry.

The securities market has n risky assets driven by a d0-dimensional common
Brownian motion; each agent additionally sees a d-dimensional idiosyncratic
Brownian motion.  The n x d0 volatility matrix sigma is deterministic and
piecewise constant on the time grid, with uniformly bounded spectrum:
lambda_lo * I <= sigma sigma^T <= lambda_hi * I.

Row vectors z in R^{1 x d0} split orthogonally into a component z_par inside
the row space of sigma_t (the hedgeable directions) and a residual z_perp.
The market price of risk associated with an excess-return vector mu is the
row-space element theta = sigma^T (sigma sigma^T)^{-1} mu.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonpositiveGamma, SingularSigma

# Relative eigenvalue threshold under which sigma sigma^T counts as singular.
_SINGULAR_REL_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with `steps` intervals."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        """Grid points t_0 = 0 < ... < t_steps = horizon (length steps + 1)."""
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True)
class MarketSpec:
    """Deterministic market data.

    sigma is either a single n x d0 matrix (constant volatility) or a
    steps x n x d0 table (one matrix per grid interval, piecewise constant).
    """

    n: int
    d0: int
    d: int
    sigma: np.ndarray
    lambda_lo: float
    lambda_hi: float

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=float)
        object.__setattr__(self, "sigma", sig)
        if self.n < 1 or self.d0 < 1 or self.d < 1:
            raise DimensionMismatch(
                f"dimensions must be positive: n={self.n}, d0={self.d0}, d={self.d}"
            )
        if self.n > self.d0:
            raise DimensionMismatch(
                f"need n <= d0 (no redundant assets), got n={self.n}, d0={self.d0}"
            )
        if sig.ndim not in (2, 3) or sig.shape[-2:] != (self.n, self.d0):
            raise DimensionMismatch(
                f"sigma must be (n, d0) or (steps, n, d0) with n={self.n}, "
                f"d0={self.d0}; got shape {sig.shape}"
            )
        if not (0.0 < self.lambda_lo <= self.lambda_hi):
            raise ValueError(
                f"need 0 < lambda_lo <= lambda_hi, got ({self.lambda_lo}, {self.lambda_hi})"
            )

    @property
    def time_varying(self) -> bool:
        return self.sigma.ndim == 3

    def sigma_at(self, step: int) -> np.ndarray:
        """Volatility matrix on grid interval [t_step, t_step+1)."""
        if self.time_varying:
            return self.sigma[step]
        return self.sigma

    def sigma_table(self, steps: int) -> np.ndarray:
        """Full steps x n x d0 table, materialising the constant case."""
        if self.time_varying:
            if self.sigma.shape[0] != steps:
                raise DimensionMismatch(
                    f"sigma table has {self.sigma.shape[0]} entries, grid has {steps} steps"
                )
            return self.sigma
        return np.broadcast_to(self.sigma, (steps, self.n, self.d0))


@dataclass(frozen=True)
class AgentParams:
    """Preferences and endowment of a single exponential-utility agent."""

    gamma: float
    xi: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma <= 0.0:
            raise NonpositiveGamma(f"risk aversion must be positive, got {self.gamma}")


@dataclass(frozen=True)
class PopulationStats:
    """Aggregate risk-aversion statistics of an agent population.

    gamma_hat is the harmonic mean 1 / E[1/gamma]; it is the aggregate
    risk aversion that prices the common-noise hedging demand.
    """

    gamma_hat: float
    gamma_lo: float
    gamma_hi: float

    @property
    def c_gamma(self) -> float:
        """Driver absolute bound constant gamma_hi/2 + gamma_hat^2/gamma_lo."""
        return 0.5 * self.gamma_hi + self.gamma_hat**2 / self.gamma_lo

    def c_gamma_spread(self, override: float | None = None) -> float:
        """Lipschitz-spread constant used by the contraction gate.

        The fixed-point argument only needs existence of such a constant;
        this implementation documents the choice
        max(gamma_hat, gamma_hat^2 / (2 gamma_lo), gamma_hi / 2)
        and lets callers override it.
        """
        if override is not None:
            if override <= 0.0:
                raise ValueError("C_gamma override must be positive")
            return override
        return max(
            self.gamma_hat,
            self.gamma_hat**2 / (2.0 * self.gamma_lo),
            0.5 * self.gamma_hi,
        )


def gamma_hat(gammas: np.ndarray, weights: np.ndarray | None = None) -> PopulationStats:
    """Population statistics from a sample (or weighted atoms) of gamma."""
    g = np.asarray(gammas, dtype=float).ravel()
    if g.size == 0:
        raise NonpositiveGamma("empty risk-aversion sample")
    if np.any(~np.isfinite(g)) or np.any(g <= 0.0):
        raise NonpositiveGamma("all risk aversions must be positive and finite")
    if weights is None:
        inv_mean = float(np.mean(1.0 / g))
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != g.shape or np.any(w < 0.0) or w.sum() <= 0.0:
            raise ValueError("weights must be nonnegative and match gammas")
        w = w / w.sum()
        inv_mean = float(np.sum(w / g))
    return PopulationStats(
        gamma_hat=1.0 / inv_mean,
        gamma_lo=float(np.min(g)),
        gamma_hi=float(np.max(g)),
    )


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the spectral check of sigma sigma^T on the grid."""

    passed: bool
    min_eig: float
    max_eig: float
    rank_ok: bool
    messages: tuple[str, ...] = field(default_factory=tuple)


def validate_market(market: MarketSpec, grid: TimeGrid) -> ValidationReport:
    """Check rank and eigenvalue bounds of sigma sigma^T at every grid time."""
    table = market.sigma_table(grid.steps)
    msgs: list[str] = []
    min_eig = np.inf
    max_eig = -np.inf
    rank_ok = True
    for k in range(grid.steps):
        gram = table[k] @ table[k].T
        eigs = np.linalg.eigvalsh(gram)
        lo, hi = float(eigs[0]), float(eigs[-1])
        min_eig = min(min_eig, lo)
        max_eig = max(max_eig, hi)
        if lo < _SINGULAR_REL_TOL * market.lambda_hi:
            raise SingularSigma(
                f"sigma sigma^T at step {k} has eigenvalue {lo:.3e} below "
                f"{_SINGULAR_REL_TOL:.0e} * lambda_hi"
            )
        if lo < market.lambda_lo * (1.0 - 1e-12):
            msgs.append(f"step {k}: min eigenvalue {lo:.6g} < lambda_lo {market.lambda_lo}")
        if hi > market.lambda_hi * (1.0 + 1e-12):
            msgs.append(f"step {k}: max eigenvalue {hi:.6g} > lambda_hi {market.lambda_hi}")
        if np.linalg.matrix_rank(table[k]) < market.n:
            rank_ok = False
            msgs.append(f"step {k}: sigma has row rank < n")
    passed = rank_ok and not msgs
    return ValidationReport(
        passed=passed,
        min_eig=min_eig,
        max_eig=max_eig,
        rank_ok=rank_ok,
        messages=tuple(msgs),
    )


def _gram_cholesky(sigma: np.ndarray) -> np.ndarray:
    """Cholesky factor of sigma sigma^T, with a relative pivot guard."""
    gram = sigma @ sigma.T
    diag_scale = float(np.max(np.diag(gram))) if gram.size else 0.0
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularSigma("sigma sigma^T is not positive definite") from exc
    piv = np.diag(chol) ** 2
    if diag_scale <= 0.0 or np.any(piv < _SINGULAR_REL_TOL * diag_scale):
        raise SingularSigma("sigma sigma^T has a pivot below the 1e-12 relative threshold")
    return chol

def _cho_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = rhs given the lower Cholesky factor L."""
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, y)


def project(sigma: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split row vectors z into (z_par, z_perp) w.r.t. the row space of sigma.

    z may have arbitrary leading shape with trailing dimension d0.  The
    parallel part is z sigma^T (sigma sigma^T)^{-1} sigma, computed through a
    Cholesky solve of the Gram matrix.  Pythagoras holds componentwise:
    |z|^2 = |z_par|^2 + |z_perp|^2.
    """
    sigma = np.asarray(sigma, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != sigma.shape[1]:
        raise DimensionMismatch(
            f"z has trailing dimension {z.shape[-1]}, sigma has d0={sigma.shape[1]}"
        )
    chol = _gram_cholesky(sigma)
    # coefficients c = (sigma sigma^T)^{-1} sigma z^T, stacked over leading dims
    zs = z.reshape(-1, z.shape[-1])
    coef = _cho_solve(chol, sigma @ zs.T)
    z_par = (coef.T @ sigma).reshape(z.shape)
    return z_par, z - z_par


def risk_premium_from_mu(sigma: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Market price of risk theta = sigma^T (sigma sigma^T)^{-1} mu.

    mu may have arbitrary leading shape with trailing dimension n; the result
    has trailing dimension d0 and lies in the row space of sigma.
    """
    sigma = np.asarray(sigma, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if mu.shape[-1] != sigma.shape[0]:
        raise DimensionMismatch(
            f"mu has trailing dimension {mu.shape[-1]}, sigma has n={sigma.shape[0]}"
        )
    chol = _gram_cholesky(sigma)
    ms = mu.reshape(-1, mu.shape[-1])
    coef = _cho_solve(chol, ms.T)
    theta = (sigma.T @ coef).T
    return theta.reshape(mu.shape[:-1] + (sigma.shape[1],))


def excess_return_from_theta(sigma: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Excess returns mu = sigma theta for row-space theta (trailing dim d0)."""
    sigma = np.asarray(sigma, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != sigma.shape[1]:
        raise DimensionMismatch(
            f"theta has trailing dimension {theta.shape[-1]}, sigma has d0={sigma.shape[1]}"
        )
    return theta @ sigma.T
