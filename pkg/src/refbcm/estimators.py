"""scikit-learn style front ends.

``X`` is trial data (a :class:`TrialDataset`, a wide table or a CSV path);
there is no separate target since the outcomes are part of ``X``.

>>> est = TreatmentPolicyEstimator(method="bcm", k0_sd=100.0, random_state=1)
>>> est.fit(ds).estimate_                                    # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_prior, check_random_state, check_seed, check_trial
from .causal import CausalParams
from .config import MethodSettings
from .harness import METHODS, MethodSpec, run_method
from .imputation import (conditional_mean_impute, draw_imputation, final_visit_moments,
                         rbi_impute, rd_impute_arrays)
from .inference.optimize import fit_map


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class TreatmentPolicyEstimator(BaseEstimator):
    """Treatment-policy effect at the final visit by any supported method.

    Parameters
    ----------
    method : str
        One of ``bcm``, ``bcm-cmi-jk``, ``bcm-cmi-bs``, ``bcm-mi-bs``, ``rd``,
        ``rbi-j2r``, ``rbi-cir``, ``ancova-complete``.
    k0_mean, k0_sd : float
        Normal prior on the maintained effect (BCM methods only).
    settings : MethodSettings, optional
    prior : PriorSpec or dict, optional
        Remaining prior hyperparameters.
    random_state : int, optional

    Attributes
    ----------
    report_ : EstimateReport
    estimate_, se_ : float
    ci_ : tuple of float
    """

    def __init__(self, method="bcm", k0_mean=0.0, k0_sd=100.0, settings=None, prior=None,
                 random_state=None):
        self.method = method
        self.k0_mean = k0_mean
        self.k0_sd = k0_sd
        self.settings = settings
        self.prior = prior
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        ds = check_trial(X)
        spec = MethodSpec(self.method, self.k0_mean, self.k0_sd)
        self.report_ = run_method(ds, spec, self.settings or MethodSettings(),
                                  check_seed(self.random_state), check_prior(self.prior))
        self.estimate_ = self.report_.point
        self.se_ = self.report_.se
        self.ci_ = (self.report_.ci_low, self.report_.ci_high)
        return self


class CausalModelImputer(TransformerMixin, BaseEstimator):
    """MAP causal model as an imputer.

    ``fit`` finds the MAP parameters; ``transform`` fills every missing
    outcome with its conditional mean (or a conditional draw when
    ``stochastic=True``); ``predict`` returns each patient's expected
    final-visit outcome given the observed data.

    Parameters
    ----------
    k0_mean, k0_sd : float
    prior : PriorSpec or dict, optional
    include_post_ice : bool
    stochastic : bool
    random_state : int or Generator, optional
    """

    def __init__(self, k0_mean=0.0, k0_sd=100.0, prior=None, include_post_ice=True,
                 stochastic=False, random_state=None):
        self.k0_mean = k0_mean
        self.k0_sd = k0_sd
        self.prior = prior
        self.include_post_ice = include_post_ice
        self.stochastic = stochastic
        self.random_state = random_state

    def fit(self, X, y=None):
        ds = check_trial(X)
        prior = check_prior(self.prior, k0_mean=self.k0_mean, k0_sd=self.k0_sd)
        self.params_: CausalParams = fit_map(ds, prior, self.include_post_ice)
        self.n_visits_ = ds.j_max
        return self

    def transform(self, X):
        """Completed outcome matrix (n, j_max)."""
        _check_fitted(self, "params_")
        ds = check_trial(X)
        if self.stochastic:
            cds = draw_imputation(ds, self.params_, check_random_state(self.random_state))
        else:
            cds = conditional_mean_impute(ds, self.params_)
        return np.array(cds.data.y)

    def predict(self, X):
        _check_fitted(self, "params_")
        mean, _ = final_visit_moments(check_trial(X), self.params_)
        return mean


class RetrievedDropoutImputer(TransformerMixin, BaseEstimator):
    """Sequential-regression imputation using retrieved dropouts.

    ``fit_transform`` / ``transform`` return an array (m, n, j_max) of
    completed outcome matrices; the regressions are refitted on the data
    being transformed.

    Parameters
    ----------
    m : int
    by_arm : bool
        Separate regressions per arm (default) or one pooled model with a
        treatment main effect.
    random_state : int or Generator, optional
    """

    def __init__(self, m=25, by_arm=True, random_state=None):
        self.m = m
        self.by_arm = by_arm
        self.random_state = random_state

    def fit(self, X, y=None):
        self.n_visits_ = check_trial(X).j_max
        return self

    def transform(self, X):
        _check_fitted(self, "n_visits_")
        ds = check_trial(X)
        return rd_impute_arrays(ds, self.m, check_random_state(self.random_state), self.by_arm)


class ReferenceBasedImputer(TransformerMixin, BaseEstimator):
    """Jump-to-reference or copy-increments-in-reference multiple imputation.

    ``fit`` is a no-op apart from validation; ``transform`` samples the
    imputation model and returns an array (m, n, j_max).
    """

    def __init__(self, variant="j2r", m=50, warmup=200, thin=50, prior=None,
                 random_state=None):
        self.variant = variant
        self.m = m
        self.warmup = warmup
        self.thin = thin
        self.prior = prior
        self.random_state = random_state

    def fit(self, X, y=None):
        if str(self.variant).lower() not in ("j2r", "cir"):
            raise ValueError("variant must be 'j2r' or 'cir'")
        self.n_visits_ = check_trial(X).j_max
        return self

    def transform(self, X):
        _check_fitted(self, "n_visits_")
        ds = check_trial(X)
        done = rbi_impute(ds, self.variant, self.m, check_prior(self.prior), self.warmup,
                          self.thin, check_random_state(self.random_state))
        return np.stack([c.data.y for c in done])
