import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from refbcm._validation import check_prior, check_random_state, check_seed, check_trial
from refbcm.config import MethodSettings
from refbcm.estimators import (CausalModelImputer, ReferenceBasedImputer,
                               RetrievedDropoutImputer, TreatmentPolicyEstimator)
from refbcm.imputation import conditional_mean_impute, final_visit_moments
from refbcm.inference.optimize import fit_map
from refbcm.inference.priors import PriorSpec
from refbcm.simulation import SimScenario, simulate_trial
from refbcm.trial import write_csv


@pytest.fixture(scope="module")
def ds():
    return simulate_trial(SimScenario(n_per_arm=80, miss_prob=0.5), 3)


def _wide(ds):
    cols = dict(id=list(ds.ids), arm=["active" if a else "control" for a in ds.active],
                base=ds.baseline, d=[int(x) if x < ds.j_max else np.nan for x in ds.d])
    for j in range(ds.j_max):
        cols[f"y{j + 1}"] = ds.y[:, j]
    return cols


@pytest.mark.parametrize("cls", [TreatmentPolicyEstimator, CausalModelImputer,
                                 RetrievedDropoutImputer, ReferenceBasedImputer])
def test_params_and_clone(cls):
    est = cls()
    params = est.get_params()
    again = clone(est)
    assert again.get_params() == params and again is not est
    est.set_params(random_state=5)
    assert est.get_params()["random_state"] == 5


def test_not_fitted(ds):
    with pytest.raises(NotFittedError):
        CausalModelImputer().transform(ds)
    with pytest.raises(NotFittedError):
        RetrievedDropoutImputer().transform(ds)


def test_policy_estimator_ancova(ds):
    est = TreatmentPolicyEstimator(method="rd", settings=MethodSettings(rd_imputations=4),
                                   random_state=0).fit(ds)
    assert est.ci_[0] < est.estimate_ < est.ci_[1] and est.se_ > 0
    with pytest.raises(ValueError):
        TreatmentPolicyEstimator(method="x").fit(ds)


def test_causal_imputer(ds):
    imp = CausalModelImputer(k0_sd=1.0).fit(ds)
    p = fit_map(ds, PriorSpec(k0_sd=1.0))
    assert np.allclose(imp.transform(ds), conditional_mean_impute(ds, p).data.y)
    assert np.allclose(imp.predict(ds), final_visit_moments(ds, p)[0])
    y = CausalModelImputer(k0_sd=1.0, stochastic=True, random_state=1).fit_transform(ds)
    assert not np.isnan(y).any()


def test_rd_imputer_shape(ds):
    out = RetrievedDropoutImputer(m=3, random_state=0).fit_transform(ds)
    assert out.shape == (3, ds.n, ds.j_max) and not np.isnan(out).any()


def test_rbi_imputer(ds):
    out = ReferenceBasedImputer(m=2, warmup=50, thin=1, random_state=0).fit_transform(ds)
    assert out.shape == (2, ds.n, ds.j_max)
    with pytest.raises(ValueError):
        ReferenceBasedImputer(variant="mar").fit(ds)


def test_check_trial_inputs(ds, tmp_path):
    path = tmp_path / "t.csv"
    write_csv(ds, path)
    from_csv = check_trial(path)
    from_dict = check_trial(_wide(ds), schedule=ds.schedule)
    for other in (from_csv, from_dict):
        assert np.array_equal(other.y, ds.y, equal_nan=True)
        assert np.array_equal(other.d, ds.d)
    with pytest.raises(TypeError):
        check_trial(3.0)


def test_check_helpers():
    assert isinstance(check_random_state(1), np.random.Generator)
    g = np.random.default_rng(0)
    assert check_random_state(g) is g
    with pytest.raises(ValueError):
        check_random_state("a")
    assert check_seed(4) == 4 and isinstance(check_seed(None), int)
    with pytest.raises(ValueError):
        check_seed(-1)
    assert check_prior({"k0_sd": 2.0}, k0_mean=1.0).k0_mean == 1.0
    with pytest.raises(TypeError):
        check_prior(3)
