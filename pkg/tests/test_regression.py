import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfequil import BasisEngine, RegressionBasis, TreeEngine, feature_columns
from mfequil.errors import RegressionRankDeficient
from mfequil.regression import GroupMeanConditioner, RidgeConditioner


def test_column_counts():
    assert RegressionBasis(degree=2).n_columns == 6
    assert RegressionBasis(degree=2, include_idio=False).n_columns == 3
    assert RegressionBasis(degree=3).n_columns == 10
    assert RegressionBasis(degree=1, include_integral=False).n_columns == 2
    with pytest.raises(ValueError):
        RegressionBasis(degree=0)


def test_feature_column_layout():
    basis = RegressionBasis(degree=2)
    x = np.array([2.0])
    w = np.array([3.0])
    run_i = np.array([5.0])
    cols = feature_columns(basis, x, run_i, w)
    assert cols.shape == (1, 6)
    # ordering: x, w, x^2, x w, w^2, I
    assert np.allclose(cols[0], [2.0, 3.0, 4.0, 6.0, 9.0, 5.0])
    no_w = feature_columns(RegressionBasis(degree=2, include_idio=False),
                           x, run_i, w)
    assert np.allclose(no_w[0], [2.0, 4.0, 5.0])


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_ridge_recovers_exact_linear_map(seed):
    rng = np.random.default_rng(seed)
    P = 400
    raw = rng.normal(size=(P, 4))
    truth = 1.5 + raw @ np.array([0.3, -2.0, 0.7, 0.05])
    cond = RidgeConditioner(raw, np.zeros(P, dtype=np.int64), 1)
    fitted, step_fit = cond.fit(truth)
    assert np.allclose(fitted, truth, atol=1e-6)
    # the stored fit reproduces the same map on fresh points
    fresh = rng.normal(size=(50, 4))
    pred = step_fit.predict(fresh, np.zeros(50, dtype=np.int64))[:, 0]
    want = 1.5 + fresh @ np.array([0.3, -2.0, 0.7, 0.05])
    assert np.allclose(pred, want, atol=1e-6)


def test_ridge_projects_conditional_mean():
    rng = np.random.default_rng(5)
    P = 100000
    raw = rng.normal(size=(P, 1))
    noise = rng.normal(size=P)
    target = 2.0 * raw[:, 0] + noise
    fitted, _ = RidgeConditioner(raw, np.zeros(P, dtype=np.int64), 1).fit(target)
    # best L2 predictor given the design is 2 x; noise is orthogonal
    assert np.sqrt(np.mean((fitted - 2.0 * raw[:, 0]) ** 2)) < 0.02


def test_stratified_fit_equals_independent_fits():
    rng = np.random.default_rng(11)
    P = 600
    raw = rng.normal(size=(P, 3))
    ids = (np.arange(P) % 2).astype(np.int64)
    y = rng.normal(size=P)
    fitted, _ = RidgeConditioner(raw, ids, 2).fit(y)
    for s in (0, 1):
        rows = ids == s
        solo, _ = RidgeConditioner(
            raw[rows], np.zeros(rows.sum(), dtype=np.int64), 1
        ).fit(y[rows])
        assert np.allclose(fitted[rows], solo, atol=1e-12)


def test_constant_columns_are_dropped():
    rng = np.random.default_rng(3)
    P = 200
    raw = np.column_stack([rng.normal(size=P), np.full(P, 7.0)])
    y = 3.0 + 2.0 * raw[:, 0]
    fitted, step_fit = RidgeConditioner(raw, np.zeros(P, dtype=np.int64), 1).fit(y)
    assert np.allclose(fitted, y, atol=1e-6)
    assert step_fit.strata[0].kept.tolist() == [True, False]


def test_collinear_columns_raise():
    rng = np.random.default_rng(4)
    P = 300
    base = rng.normal(size=P)
    raw = np.column_stack([base, 2.0 * base])
    with pytest.raises(RegressionRankDeficient):
        RidgeConditioner(raw, np.zeros(P, dtype=np.int64), 1)


def test_too_few_rows_raise():
    raw = np.random.default_rng(0).normal(size=(30, 5))
    with pytest.raises(RegressionRankDeficient):
        RidgeConditioner(raw, np.zeros(30, dtype=np.int64), 1)


def test_weighted_fit_shifts_toward_heavy_rows():
    P = 1000
    rng = np.random.default_rng(8)
    raw = rng.normal(size=(P, 1))
    y = np.where(np.arange(P) < P // 2, 1.0, -1.0)
    w = np.where(np.arange(P) < P // 2, 3.0, 1.0)
    cond = RidgeConditioner(raw, np.zeros(P, dtype=np.int64), 1, weights=w)
    _, fit = cond.fit(y)
    assert fit.strata[0].beta0[0] == pytest.approx((3.0 - 1.0) / 4.0, abs=0.05)


def test_group_mean_conditioner_is_exact():
    keys = np.array([0, 0, 1, 1, 1, 2])
    y = np.array([1.0, 3.0, 2.0, 4.0, 6.0, 10.0])
    fitted, _ = GroupMeanConditioner(keys).fit(y)
    assert np.allclose(fitted, [2.0, 2.0, 4.0, 4.0, 4.0, 10.0])
    w = np.array([1.0, 3.0, 1.0, 1.0, 2.0, 5.0])
    fitted_w, _ = GroupMeanConditioner(keys, weights=w).fit(y)
    assert fitted_w[0] == pytest.approx((1 + 9) / 4)
    assert fitted_w[2] == pytest.approx((2 + 4 + 12) / 4)


def test_tree_engine_indexes_steps():
    keys = [np.array([0, 0, 1, 1]), np.array([0, 1, 2, 3])]
    eng = TreeEngine(keys)
    y = np.array([1.0, 2.0, 3.0, 4.0])
    f0, _ = eng.at(0).fit(y)
    f1, _ = eng.at(1).fit(y)
    assert np.allclose(f0, [1.5, 1.5, 3.5, 3.5])
    assert np.allclose(f1, y)


def test_basis_engine_broadcasts_common_state():
    M0, K, steps = 4, 3, 2
    rng = np.random.default_rng(2)
    x = rng.normal(size=(M0, steps + 1))
    run_i = rng.normal(size=(M0, steps + 1))
    w = rng.normal(size=(M0, K, steps + 1))
    eng = BasisEngine(x, run_i, w, RegressionBasis(degree=1))
    cols = eng.columns_at(1)
    assert cols.shape == (M0 * K, 3)
    # row (m, k) carries x[m], w[m, k], I[m]
    assert cols[0, 0] == x[0, 1] and cols[1, 0] == x[0, 1] and cols[3, 0] == x[1, 1]
    assert cols[1, 1] == w[0, 1, 1]
    assert cols[2, 2] == run_i[0, 1]


def test_step_fit_rejects_unseen_stratum():
    rng = np.random.default_rng(6)
    raw = rng.normal(size=(200, 2))
    ids = np.zeros(200, dtype=np.int64)
    _, fit = RidgeConditioner(raw, ids, 2).fit(rng.normal(size=200))
    with pytest.raises(ValueError):
        fit.predict(raw[:5], np.ones(5, dtype=np.int64))
