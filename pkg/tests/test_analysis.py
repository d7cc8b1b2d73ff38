import numpy as np
import pytest
from scipy import stats

from refbcm.analysis import EstimateReport, ancova, ancova_arrays, covered, interval
from refbcm.simulation import SimScenario, simulate_trial


def test_identical_arms_zero_effect():
    base = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
    y = 0.5 + 2 * base
    y = np.r_[y[:3] + [0.1, -0.2, 0.1], y[3:] + [0.1, -0.2, 0.1]]
    est, se, df = ancova_arrays(y, base, np.r_[np.zeros(3), np.ones(3)])
    assert est == pytest.approx(0.0, abs=1e-12) and df == 3


def test_six_point_hand_solution():
    # treatment coefficient solved by hand from the normal equations
    base = np.array([0.0, 1.0, 2.0, 0.0, 1.0, 2.0])
    t = np.array([0, 0, 0, 1, 1, 1.0])
    y = np.array([1.0, 2.0, 4.0, 2.0, 4.0, 5.0])
    est, se, df = ancova_arrays(y, base, t)
    assert est == pytest.approx(4 / 3, abs=1e-12)
    # slope 1.5, intercept 5/6; residuals and s^2 = 1/3 / 3
    resid = y - (5 / 6 + 1.5 * base + 4 / 3 * t)
    s2 = resid @ resid / 3
    assert s2 == pytest.approx(1 / 9)
    assert se == pytest.approx(np.sqrt(s2 * 2 / 6 * 2), abs=1e-12)


def test_residuals_orthogonal_to_design():
    rng = np.random.default_rng(0)
    base = rng.normal(size=50)
    t = np.repeat([0.0, 1.0], 25)
    y = rng.normal(size=50) + base + t
    est, _, _ = ancova_arrays(y, base, t)
    x = np.column_stack([np.ones(50), base, t])
    coef = np.linalg.lstsq(x, y, rcond=None)[0]
    assert est == pytest.approx(coef[2], abs=1e-12)
    assert np.allclose(x.T @ (y - x @ coef), 0, atol=1e-10)


def test_baseline_recentring_invariance():
    ds = simulate_trial(SimScenario(beta0=-100.0, miss_prob=0.0, n_per_arm=80), 0)
    a = ancova_arrays(ds.y[:, -1], ds.baseline, ds.treatment)
    b = ancova_arrays(ds.y[:, -1], ds.baseline - 7.9, ds.treatment)
    assert a[0] == pytest.approx(b[0], abs=1e-10) and a[1] == pytest.approx(b[1], abs=1e-10)
    res = ancova(ds)
    assert res.estimate == pytest.approx(a[0]) and res.df == ds.n - 3


def test_multiple_outcome_vectors():
    rng = np.random.default_rng(1)
    base = rng.normal(size=30)
    t = np.repeat([0.0, 1.0], 15)
    ys = rng.normal(size=(4, 30))
    est, se, _ = ancova_arrays(ys, base, t)
    for k in range(4):
        e, s, _ = ancova_arrays(ys[k], base, t)
        assert est[k] == pytest.approx(e) and se[k] == pytest.approx(s)


def test_robust_se_matches_hc0():
    rng = np.random.default_rng(2)
    n = 40
    base = rng.normal(size=n)
    t = np.repeat([0.0, 1.0], n // 2)
    y = base + t + rng.normal(size=n) * (1 + t)
    _, se, _ = ancova_arrays(y, base, t, robust=True)
    x = np.column_stack([np.ones(n), base, t])
    inv = np.linalg.inv(x.T @ x)
    e = y - x @ (inv @ x.T @ y)
    cov = inv @ (x.T * e**2) @ x @ inv
    assert se == pytest.approx(np.sqrt(cov[2, 2]), rel=1e-10)


def test_ancova_errors():
    base = np.arange(4.0)
    with pytest.raises(np.linalg.LinAlgError):
        ancova_arrays(np.ones(4), base, np.zeros(4))
    with pytest.raises(ValueError):
        ancova_arrays(np.array([1, np.nan, 2, 3.0]), base, np.array([0, 0, 1, 1.0]))


def test_interval_examples():
    lo, hi = interval(1.0, 0.5)
    assert hi - 1.0 == pytest.approx(0.5 * stats.norm.ppf(0.975))
    lo, hi = interval(0.0, 1.0, df=10)
    assert hi == pytest.approx(stats.t.ppf(0.975, 10))
    assert interval(2.0, 0.0) == (2.0, 2.0)
    with pytest.raises(ValueError):
        interval(0.0, -1.0)


def test_interval_width_monotone():
    widths = [np.diff(interval(0, 1, df))[0] for df in (3, 10, 100, None)]
    assert np.all(np.diff(widths) < 0)
    lv = [np.diff(interval(0, 1, None, lev))[0] for lev in (0.5, 0.9, 0.95, 0.99)]
    assert np.all(np.diff(lv) > 0)


def test_covered_edges():
    rep = EstimateReport("x", 0.0, 1.0, -1.0, 1.0)
    assert covered(rep, 1.0) and covered(rep, -1.0) and not covered(rep, 1.0000001)


def test_report_validation_and_json():
    with pytest.raises(ValueError):
        EstimateReport("x", 0.0, 1.0, 1.0, -1.0)
    with pytest.raises(ValueError):
        EstimateReport("x", 0.0, -1.0, -1.0, 1.0)
    rep = EstimateReport("x", np.float64(0.5), 0.1, 0.3, 0.7, dict(df=np.int64(5)))
    assert '"df": 5' in rep.to_json() and "estimate" in rep.format()
