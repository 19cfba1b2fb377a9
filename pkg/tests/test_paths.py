import numpy as np
import pytest

from mfequil import EqgSpec, TimeGrid, coarsen_bundle, export_paths_csv, simulate_paths
from mfequil.paths import KIND_COMMON, normal_block_array, ou_exact_moments

from conftest import make_market


def test_same_seed_same_paths(grid20, eqg_spec, market2):
    a = simulate_paths(grid20, eqg_spec, market2, 32, 123, agents=3)
    b = simulate_paths(grid20, eqg_spec, market2, 32, 123, agents=3)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.dW0, b.dW0)
    assert np.array_equal(a.dWi, b.dWi)
    c = simulate_paths(grid20, eqg_spec, market2, 32, 124, agents=3)
    assert not np.array_equal(a.dW0, c.dW0)


def test_path_prefix_stable_under_growth(grid20, eqg_spec, market2):
    """Counter-based streams: enlarging the batch must not disturb the
    draws already assigned to earlier paths."""
    small = simulate_paths(grid20, eqg_spec, market2, 8, 99)
    big = simulate_paths(grid20, eqg_spec, market2, 64, 99)
    assert np.array_equal(big.dW0[:8], small.dW0)
    assert np.array_equal(big.x[:8], small.x)


def test_block_array_worker_count_invariant():
    from mfequil import parallel

    old = parallel.get_max_workers()
    try:
        parallel.set_max_workers(1)
        serial = normal_block_array(7, KIND_COMMON, (5000, 3))
        parallel.set_max_workers(8)
        threaded = normal_block_array(7, KIND_COMMON, (5000, 3))
    finally:
        parallel.set_max_workers(old)
    assert np.array_equal(serial, threaded)


def test_common_increments_shared_across_agents(grid20, eqg_spec, market2):
    one = simulate_paths(grid20, eqg_spec, market2, 16, 5, agents=1)
    many = simulate_paths(grid20, eqg_spec, market2, 16, 5, agents=4)
    assert np.array_equal(one.dW0, many.dW0)
    assert np.array_equal(one.x, many.x)
    # idio increments differ per agent
    assert not np.array_equal(many.dWi[:, 0], many.dWi[:, 1])


def test_euler_matches_ou_moments(eqg_spec, market2):
    grid = TimeGrid(0.5, 400)
    bundle = simulate_paths(grid, eqg_spec, market2, 20000, 2024)
    mean_th, var_th = ou_exact_moments(eqg_spec, grid.horizon)
    xT = bundle.x[:, -1]
    # Euler bias is O(dt); MC error ~ sd/sqrt(M)
    assert abs(np.mean(xT) - mean_th) < 4 * np.sqrt(var_th / 20000) + 5e-3
    assert abs(np.var(xT) - var_th) < 5e-3


def test_integral_leg_is_left_riemann(grid20, eqg_spec, market2):
    bundle = simulate_paths(grid20, eqg_spec, market2, 4, 11)
    x, dt = bundle.x, grid20.dt
    integrand = eqg_spec.a * x[:, :-1] ** 2 + eqg_spec.b * x[:, :-1]
    manual = np.cumsum(integrand * dt, axis=1)
    assert np.allclose(bundle.I[:, 1:], manual, atol=1e-14)


def test_coarsen_bundle_aggregates_increments(grid20, eqg_spec, market2):
    fine = simulate_paths(grid20, eqg_spec, market2, 12, 31, agents=2)
    coarse = coarsen_bundle(fine, 4, eqg_spec)
    assert coarse.grid.steps == 5
    assert coarse.grid.horizon == grid20.horizon
    # Brownian increments add up exactly over merged intervals
    merged = fine.dW0.reshape(12, 5, 4, -1).sum(axis=2)
    assert np.allclose(coarse.dW0, merged, atol=1e-15)
    # the state is re-run with the Euler map on the coarse grid
    assert np.allclose(coarse.x[:, 0], eqg_spec.x0)
    with pytest.raises(ValueError):
        coarsen_bundle(fine, 3, eqg_spec)


def test_export_paths_csv(tmp_path, grid20, eqg_spec, market2):
    bundle = simulate_paths(grid20, eqg_spec, market2, 3, 8)
    out = tmp_path / "paths.csv"
    export_paths_csv(bundle, str(out))
    lines = out.read_text().splitlines()
    assert lines[0].startswith("path,")
    assert len(lines) == 1 + 3 * (grid20.steps + 1)


def test_simulate_paths_validates_inputs(grid20, eqg_spec, market2):
    with pytest.raises(ValueError):
        simulate_paths(grid20, eqg_spec, market2, 0, 1)
    bad_spec = EqgSpec(alpha=-0.5, beta=0.0, delta=(0.4,), x0=0.0, a=0.0, b=0.1)
    with pytest.raises(ValueError):
        simulate_paths(grid20, bad_spec, market2, 4, 1)
