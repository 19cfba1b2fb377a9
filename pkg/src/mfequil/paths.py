"""Path simulation for the common factor and agent noise.

All randomness comes from counter-based Philox substreams.  Streams are keyed
by (seed, stream kind, block index) where a block is a fixed slice of path
indices, so the generated arrays are bit-identical no matter how many worker
threads fill them.  The factor follows Euler-Maruyama on the same increments
the BSDE regressions consume, and the running liability integral I uses the
left-endpoint rule, so factor, integral, and regressions stay on one
discretisation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import parallel
from .market import MarketSpec, TimeGrid
from .riccati import EqgSpec

# stream kinds; population draws live here too so scenario assembly stays
# on the same keying scheme
KIND_COMMON = 1
KIND_IDIO = 2
KIND_GAMMA = 3
KIND_XI = 4
KIND_AUX = 5


def _philox(seed: int, kind: int, block: int) -> np.random.Generator:
    key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64((kind << 40) | block)
    return np.random.Generator(np.random.Philox(key=key))


def normal_block_array(seed: int, kind: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals of the given shape, leading axis split into blocks.

    The draw for leading index i depends only on (seed, kind, i // BLOCK,
    position within block), never on the worker count.
    """
    total = shape[0]
    per_row = int(np.prod(shape[1:], dtype=np.int64))
    out = np.empty((total, per_row))
    ranges = parallel.block_ranges(total)

    def fill(b, start, stop):
        g = _philox(seed, kind, b)
        out[start:stop] = g.standard_normal(((stop - start), per_row))

    parallel.run_blocks(fill, ranges)
    return out.reshape(shape)


@dataclass
class PathBundle:
    """Simulated common paths with per-agent idiosyncratic increments.

    dW0: (M, steps, d0) common Brownian increments.
    dWi: (M, K, steps, d) idiosyncratic increments, K agents per common path.
    x:   (M, steps + 1) Euler path of the OU factor.
    I:   (M, steps + 1) left-rule running integral of a x^2 + b x.
    """

    grid: TimeGrid
    dW0: np.ndarray
    dWi: np.ndarray
    x: np.ndarray
    I: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.dW0.shape[0]

    @property
    def n_agents(self) -> int:
        return self.dWi.shape[1]

    @cached_property
    def w0(self) -> np.ndarray:
        """Cumulative common Brownian path, (M, steps + 1, d0), W0_0 = 0."""
        M, steps, d0 = self.dW0.shape
        out = np.zeros((M, steps + 1, d0))
        np.cumsum(self.dW0, axis=1, out=out[:, 1:])
        return out

    @cached_property
    def wi_first(self) -> np.ndarray:
        """Cumulative first idiosyncratic coordinate, (M, K, steps + 1)."""
        M, K, steps, _ = self.dWi.shape
        out = np.zeros((M, K, steps + 1))
        np.cumsum(self.dWi[..., 0], axis=2, out=out[..., 1:])
        return out


def simulate_paths(
    grid: TimeGrid,
    spec: EqgSpec,
    market: MarketSpec,
    n_paths: int,
    seed: int,
    agents: int = 1,
) -> PathBundle:
    """Euler-Maruyama factor paths plus Brownian increments for `agents` agents."""
    if n_paths < 1 or agents < 1:
        raise ValueError("n_paths and agents must be >= 1")
    if len(spec.delta) != market.d0:
        raise ValueError(
            f"delta has {len(spec.delta)} components, market has d0={market.d0}"
        )
    steps, dt = grid.steps, grid.dt
    sqdt = np.sqrt(dt)

    dW0 = normal_block_array(seed, KIND_COMMON, (n_paths, steps, market.d0)) * sqdt
    dWi = (
        normal_block_array(seed, KIND_IDIO, (n_paths * agents, steps, market.d))
        .reshape(n_paths, agents, steps, market.d)
        * sqdt
    )

    x = np.empty((n_paths, steps + 1))
    I = np.empty((n_paths, steps + 1))
    x[:, 0] = spec.x0
    I[:, 0] = 0.0
    delta = spec.delta_vec
    for k in range(steps):
        xk = x[:, k]
        I[:, k + 1] = I[:, k] + (spec.a * xk * xk + spec.b * xk) * dt
        x[:, k + 1] = xk + (spec.alpha * xk + spec.beta) * dt + dW0[:, k] @ delta
    return PathBundle(grid=grid, dW0=dW0, dWi=dWi, x=x, I=I, seed=seed)


def ou_exact_moments(spec: EqgSpec, t: float) -> tuple[float, float]:
    """Exact mean and variance of the OU factor at time t (for statistical tests)."""
    a, b = spec.alpha, spec.beta
    if abs(a) < 1e-14:
        mean = spec.x0 + b * t
        var = spec.delta_sq * t
    else:
        e = np.exp(a * t)
        mean = e * spec.x0 + (b / a) * (e - 1.0)
        var = spec.delta_sq * (np.exp(2.0 * a * t) - 1.0) / (2.0 * a)
    return float(mean), float(var)


def format_float(v: float) -> str:
    return f"{v:.17g}"


def export_paths_csv(bundle: PathBundle, out_path: str) -> None:
    """Write (path, step, t, x, I, dW0_1..dW0_d0) rows, one per grid node.

    The increment columns hold the increment on [t_k, t_k+1); they are zero
    in each path's terminal row.
    """
    grid = bundle.grid
    d0 = bundle.dW0.shape[2]
    times = grid.times
    with open(out_path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["path", "step", "t", "x", "I"] + [f"dW0_{j + 1}" for j in range(d0)]
        )
        for m in range(bundle.n_paths):
            for k in range(grid.steps + 1):
                inc = bundle.dW0[m, k] if k < grid.steps else np.zeros(d0)
                writer.writerow(
                    [m, k, format_float(times[k]), format_float(bundle.x[m, k]),
                     format_float(bundle.I[m, k])]
                    + [format_float(v) for v in inc]
                )


def coarsen_bundle(bundle: PathBundle, factor: int, spec: EqgSpec) -> PathBundle:
    """Aggregate increments onto a grid `factor` times coarser, same noise.

    Used for refinement studies on a fixed Brownian path: the coarse bundle's
    increments are sums of the fine ones, and the factor path is re-run with
    Euler on the coarse grid.
    """
    grid = bundle.grid
    if grid.steps % factor != 0:
        raise ValueError(f"steps {grid.steps} not divisible by factor {factor}")
    steps_c = grid.steps // factor
    coarse_grid = TimeGrid(grid.horizon, steps_c)
    M, _, d0 = bundle.dW0.shape
    K = bundle.n_agents
    d = bundle.dWi.shape[3]
    dW0 = bundle.dW0.reshape(M, steps_c, factor, d0).sum(axis=2)
    dWi = bundle.dWi.reshape(M, K, steps_c, factor, d).sum(axis=3)

    dt = coarse_grid.dt
    x = np.empty((M, steps_c + 1))
    I = np.empty((M, steps_c + 1))
    x[:, 0] = spec.x0
    I[:, 0] = 0.0
    delta = spec.delta_vec
    for k in range(steps_c):
        xk = x[:, k]
        I[:, k + 1] = I[:, k] + (spec.a * xk * xk + spec.b * xk) * dt
        x[:, k + 1] = xk + (spec.alpha * xk + spec.beta) * dt + dW0[:, k] @ delta
    return PathBundle(grid=coarse_grid, dW0=dW0, dWi=dWi, x=x, I=I, seed=bundle.seed)
