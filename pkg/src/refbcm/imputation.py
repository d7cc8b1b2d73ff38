"""Imputation estimators: conditional-mean and stochastic imputation under the
causal model, retrieved-dropout sequential regression, reference-based
(J2R / CIR) multiple imputation and Rubin's rules.

Under the causal model every patient's outcome vector is Gaussian with a mean
set by arm, ICE visit and ``k0``; missing cells are imputed from the
conditional Gaussian given that patient's observed cells. Patients sharing
(arm, ICE visit, observation pattern) share the regression matrix, so the work
is done once per pattern.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .analysis import EstimateReport, Z975, ancova_arrays, interval
from .causal import CausalParams
from .exceptions import ConvergenceWarning, NonEstimableError, OptimizationError
from .inference.density import PosteriorModel, group_stats
from .inference.optimize import fit_map_model, refit_map
from .inference.posterior import sample_posterior
from .inference.priors import PriorSpec
from .trial import TrialDataset, write_csv

PROVENANCE = ("conditional_mean", "stochastic_draw", "rd", "rbi_j2r", "rbi_cir")


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    """A trial dataset with every cell filled in, tagged by how it was filled."""

    data: TrialDataset
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ValueError(f"provenance must be one of {PROVENANCE}")
        if self.data.n_missing:
            raise ValueError("completed dataset still has missing cells")

    def to_csv(self, path):
        write_csv(self.data, path, comment=f"provenance: {self.provenance}")


# -- conditional Gaussian engine ------------------------------------------------


def _patient_means(p: CausalParams, active, baseline, d):
    """Marginal mean vector of every patient under ``p`` (n, j_max)."""
    j_max = p.j_max
    x = baseline[:, None] * p.alpha[None, :]
    mean = np.where(active[:, None], p.mu_active, p.mu_control) + x
    visits = np.arange(1, j_max + 1)
    post = active[:, None] & (visits[None, :] > d[:, None])
    if post.any():
        delta = p.mu_active - p.mu_control
        shift = p.k0 * delta[np.clip(d, 1, j_max) - 1]
        ctrl = p.mu_control[None, :] + x + shift[:, None]
        mean = np.where(post, ctrl, mean)
    return mean


def _pattern_groups(active, d, observed, need):
    """Group rows needing imputation by (arm, ICE visit, observation mask)."""
    rows = np.flatnonzero(need)
    if rows.size == 0:
        return []
    j_max = observed.shape[1]
    bits = observed[rows].astype(np.int64) @ (1 << np.arange(j_max, dtype=np.int64))
    # control means do not depend on d
    d_key = np.where(active[rows], d[rows], 0)
    code = (bits * (j_max + 1) + d_key) * 2 + active[rows]
    uniq, inv = np.unique(code, return_inverse=True)
    return [rows[inv == g] for g in range(uniq.size)]


def _conditional_pieces(sigma, obs, tgt):
    """Regression matrix ``B^T`` and Schur complement for one pattern."""
    if not obs.any():
        return np.zeros((0, tgt.sum())), sigma[np.ix_(tgt, tgt)]
    s_oo = sigma[np.ix_(obs, obs)]
    s_ot = sigma[np.ix_(obs, tgt)]
    c = linalg.cho_factor(s_oo, lower=True)
    bt = linalg.cho_solve(c, s_ot)
    schur = sigma[np.ix_(tgt, tgt)] - s_ot.T @ bt
    return bt, 0.5 * (schur + schur.T)


def conditional_moments(p, y, active, baseline, d, targets=None):
    """Conditional means and covariances of missing cells.

    Parameters
    ----------
    p : CausalParams
    y : ndarray (n, j_max)
        NaN marks missing cells.
    active, baseline, d : ndarray (n,)
    targets : array_like of int, optional
        0-based visit indices to impute; other missing cells are
        marginalised out. Default: all visits.

    Returns
    -------
    list of (rows, target_idx, cmean (len(rows), k), ccov (k, k))
    """
    observed = ~np.isnan(y)
    j_max = y.shape[1]
    want = np.zeros(j_max, dtype=bool)
    want[np.arange(j_max) if targets is None else np.asarray(targets)] = True
    need = (~observed & want[None, :]).any(axis=1)
    out = []
    groups = _pattern_groups(active, d, observed, need)
    if not groups:
        return out
    mean = _patient_means(p, active, baseline, d)
    for rows in groups:
        obs = observed[rows[0]]
        tgt = ~obs & want
        bt, schur = _conditional_pieces(p.sigma, obs, tgt)
        cm = mean[np.ix_(rows, tgt)]
        if obs.any():
            cm = cm + (y[np.ix_(rows, obs)] - mean[np.ix_(rows, obs)]) @ bt
        out.append((rows, np.flatnonzero(tgt), cm, schur))
    return out


def _psd_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def _fill(y, pieces, rng=None):
    out = y.copy()
    for rows, tgt, cm, cov in pieces:
        vals = cm
        if rng is not None and np.any(cov):
            z = rng.standard_normal(cm.shape)
            vals = cm + z @ _psd_factor(cov).T
        out[np.ix_(rows, tgt)] = vals
    return out


def conditional_mean_impute(ds, p):
    """Fill every missing cell with its conditional mean under ``p``."""
    pieces = conditional_moments(p, ds.y, ds.active, ds.baseline, ds.d)
    return CompletedDataset(ds.with_outcomes(_fill(ds.y, pieces)), "conditional_mean")


def draw_imputation(ds, p, rng, provenance="stochastic_draw"):
    """Fill missing cells with a joint draw from their conditional Gaussian."""
    pieces = conditional_moments(p, ds.y, ds.active, ds.baseline, ds.d)
    return CompletedDataset(ds.with_outcomes(_fill(ds.y, pieces, rng)), provenance)


def final_visit_moments(ds, p):
    """Conditional mean and variance of the final-visit outcome of every
    patient (observed values have variance zero)."""
    y = ds.y
    j = ds.j_max - 1
    mean = y[:, j].copy()
    var = np.zeros(ds.n)
    for rows, _, cm, cov in conditional_moments(p, y, ds.active, ds.baseline, ds.d, [j]):
        mean[rows] = cm[:, 0]
        var[rows] = cov[0, 0]
    return mean, np.maximum(var, 0.0)


# -- Rubin's rules ------------------------------------------------------------


@dataclass(frozen=True)
class PooledResult:
    """Multiple-imputation summary.

    ``total_var = within_var + (1 + 1/M) between_var``; ``df`` follows the
    Barnard-Rubin small-sample formula.
    """

    estimate: float
    within_var: float
    between_var: float
    total_var: float
    df: float
    m: int

    @property
    def se(self):
        return float(np.sqrt(self.total_var))

    def interval(self, level=0.95):
        return interval(self.estimate, self.se, self.df, level)


def rubins_rules(points, variances, complete_df=None):
    """Pool ``M >= 2`` point estimates and their complete-data variances.

    With ``complete_df=None`` the large-sample Rubin df is returned.
    """
    q = np.asarray(points, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.size
    if m < 2 or u.shape != q.shape:
        raise ValueError("need at least two estimates with matching variances")
    q_bar = q.mean()
    u_bar = u.mean()
    b = q.var(ddof=1)
    t = u_bar + (1.0 + 1.0 / m) * b
    lam = (1.0 + 1.0 / m) * b / t if t > 0 else 0.0
    nu_old = (m - 1) / lam**2 if lam > 0 else np.inf
    if complete_df is None or not np.isfinite(complete_df):
        df = nu_old
    else:
        nu_com = float(complete_df)
        nu_obs = (nu_com + 1.0) / (nu_com + 3.0) * nu_com * (1.0 - lam)
        df = nu_obs if not np.isfinite(nu_old) else nu_old * nu_obs / (nu_old + nu_obs)
    return PooledResult(float(q_bar), float(u_bar), float(b), float(t), float(df), m)


def pooled_report(method, pooled, aux=None):
    lo, hi = pooled.interval()
    extra = dict(df=pooled.df, within_var=pooled.within_var,
                 between_var=pooled.between_var, m=pooled.m)
    extra.update(aux or {})
    return EstimateReport(method, pooled.estimate, pooled.se, lo, hi, extra)


# -- retrieved-dropout sequential regression -----------------------------------


def _weeks_since_ice(ds):
    """``P_j``: weeks between visit ``j`` and the last on-treatment visit (0 before)."""
    t = np.asarray(ds.schedule.followup)
    t_d = t[ds.d - 1]
    p = t[None, :] - t_d[:, None]
    return np.where(np.arange(1, ds.j_max + 1)[None, :] > ds.d[:, None], p, 0.0)


def _rd_design(ds, y_cur, weeks_since, j, with_treatment):
    cols = [np.ones(ds.n)]
    if with_treatment:
        cols.append(ds.treatment)
    cols += [weeks_since[:, j], ds.baseline]
    cols += [y_cur[:, k] for k in range(j)]
    return np.column_stack(cols)


def _rd_fit(x, yj, visit):
    """Least-squares pieces for the normal-linear imputation model."""
    n, k = x.shape
    if n < k + 2:
        raise NonEstimableError(
            f"visit {visit}: {n} complete cases for {k} regressors", visit=visit
        )
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise NonEstimableError(
            f"visit {visit}: imputation regression is rank deficient", visit=visit
        )
    coef = linalg.solve_triangular(r, q.T @ yj)
    resid = yj - x @ coef
    r_inv = linalg.solve_triangular(r, np.eye(k))
    return coef, float(resid @ resid), n - k, r_inv


def _rd_plan(ds, by_arm=True, use_ice_time=True):
    """Regressions needed per visit (and arm), rank-checked once up front."""
    observed = ds.observed
    weeks = _weeks_since_ice(ds)
    if not use_ice_time:
        weeks = np.zeros_like(weeks)
    strata = [~ds.active, ds.active] if by_arm else [np.ones(ds.n, dtype=bool)]
    plan = []
    for j in range(ds.j_max):
        for sel in strata:
            miss = sel & ~observed[:, j]
            if not miss.any():
                continue
            x_all = _rd_design(ds, np.nan_to_num(ds.y), weeks, j, not by_arm)[sel]
            # a column that is zero for every row carries nothing and is dropped
            keep = np.any(x_all != 0, axis=0)
            keep[0] = True
            fit_rows = sel & observed[:, j]
            x_fit = _rd_design(ds, np.nan_to_num(ds.y), weeks, j, not by_arm)[fit_rows]
            _rd_fit(x_fit[:, keep], ds.y[fit_rows, j], j + 1)
            plan.append((j, keep, fit_rows, miss))
    return plan, weeks


def rd_impute_arrays(ds, m, rng, by_arm=True, use_ice_time=True):
    """``m`` completed outcome matrices from retrieved-dropout imputation.

    Each imputation walks the visits in order; at visit ``j`` the regression
    of ``Y_j`` on ``[1, P_j, baseline, Y_1..Y_{j-1}]`` is fitted to rows
    with ``Y_j`` observed (earlier outcomes observed or already imputed),
    then ``(sigma, beta)`` are drawn from their posterior under a flat prior
    and the missing ``Y_j`` imputed.

    Parameters
    ----------
    by_arm : bool
        Fit separate regressions per arm (default). Otherwise one pooled
        regression with a treatment main effect is used.
    use_ice_time : bool
        Include ``P_j`` (weeks since the last on-treatment visit, 0 while on
        treatment). Without it the procedure is ordinary sequential MAR
        imputation.
    """
    plan, weeks = _rd_plan(ds, by_arm, use_ice_time)
    out = np.empty((m,) + ds.y.shape)
    for i, child in enumerate(rng.spawn(m)):
        y_cur = ds.y.copy()
        for j, keep, fit_rows, miss in plan:
            x = _rd_design(ds, y_cur, weeks, j, not by_arm)[:, keep]
            coef, rss, df, r_inv = _rd_fit(x[fit_rows], ds.y[fit_rows, j], j + 1)
            sigma = np.sqrt(rss / child.chisquare(df))
            beta = coef + sigma * (r_inv @ child.standard_normal(coef.size))
            xm = x[miss]
            y_cur[miss, j] = xm @ beta + sigma * child.standard_normal(xm.shape[0])
        out[i] = y_cur
    return out


def rd_impute(ds, m, rng, by_arm=True, use_ice_time=True):
    """Retrieved-dropout multiple imputation (see :func:`rd_impute_arrays`).

    Raises
    ------
    NonEstimableError
        A visit with missing values has too few complete cases or a
        rank-deficient imputation regression.
    """
    ys = rd_impute_arrays(ds, m, rng, by_arm, use_ice_time)
    return [CompletedDataset(ds.with_outcomes(y), "rd") for y in ys]


def rd_estimate(ds, m, rng, by_arm=True):
    """Retrieved-dropout MI + ANCOVA + Rubin's rules."""
    if not ds.n_missing:
        est, se, df = ancova_arrays(ds.y[:, -1], ds.baseline, ds.treatment)
        lo, hi = interval(est, se, df)
        return EstimateReport("rd", est, se, lo, hi, dict(df=df, m=0))
    ys = rd_impute_arrays(ds, m, rng, by_arm)
    est, se, df = ancova_arrays(ys[:, :, -1], ds.baseline, ds.treatment)
    pooled = rubins_rules(est, se**2, complete_df=ds.n - 3)
    return pooled_report("rd", pooled)


# -- reference-based imputation -------------------------------------------------

_VARIANT_K0 = {"j2r": 0.0, "cir": 1.0}


def rbi_draws(ds, variant, m, prior=None, warmup=200, thin=50, seed=0):
    """Posterior draws for reference-based imputation.

    The imputation model is fitted to pre-ICE data only (observed post-ICE
    blocks of the active arm are ignored) with ``k0`` fixed by the variant.
    """
    variant = variant.lower()
    if variant not in _VARIANT_K0:
        raise ValueError("variant must be 'j2r' or 'cir'")
    prior = PriorSpec() if prior is None else prior
    # a single thinned chain of m draws cannot meet the ESS target by design
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return sample_posterior(
            ds, prior, include_post_ice=False, chains=1, warmup=warmup, keep=m, seed=seed,
            thin=thin, fixed_k0=_VARIANT_K0[variant],
        )


def rbi_impute(ds, variant, m, prior=None, warmup=200, thin=50, rng=None):
    """``m`` completed datasets from J2R or CIR imputation.

    Each retained posterior draw yields one dataset; missing cells are drawn
    from the causal-model conditional Gaussian given all observed cells of
    the patient, with ``k0`` fixed at 0 (J2R) or 1 (CIR).
    """
    rng = np.random.default_rng() if rng is None else rng
    seed = int(rng.integers(2**63 - 1))
    post = rbi_draws(ds, variant, m, prior, warmup, thin, seed)
    tag = "rbi_" + variant.lower()
    return [draw_imputation(ds, p, child, tag) for p, child in zip(post.draws, rng.spawn(m))]


def rbi_estimate(ds, variant, m, prior=None, warmup=200, thin=50, rng=None):
    """Reference-based MI + ANCOVA + Rubin's rules (final visit only)."""
    rng = np.random.default_rng() if rng is None else rng
    seed = int(rng.integers(2**63 - 1))
    post = rbi_draws(ds, variant, m, prior, warmup, thin, seed)
    finals = np.empty((m, ds.n))
    for i, (p, child) in enumerate(zip(post.draws, rng.spawn(m))):
        mean, var = final_visit_moments(ds, p)
        finals[i] = mean + np.sqrt(var) * child.standard_normal(ds.n)
    est, se, df = ancova_arrays(finals, ds.baseline, ds.treatment)
    pooled = rubins_rules(est, se**2, complete_df=ds.n - 3)
    aux = dict(converged=post.converged, divergences=post.meta.get("divergences", 0))
    return pooled_report("rbi-" + variant.lower(), pooled, aux)


# -- BCM imputation with resampling -----------------------------------------------


def stratified_resample(active, rng):
    """Bootstrap row indices drawn with replacement within each arm."""
    idx = []
    for arm in (False, True):
        rows = np.flatnonzero(active == arm)
        idx.append(rows[rng.integers(0, rows.size, rows.size)])
    return np.sort(np.concatenate(idx))


class _MapFitter:
    """MAP on the full data plus warm-started refits on perturbed data."""

    def __init__(self, ds, prior):
        self.ds = ds
        self.model = PosteriorModel(ds, prior, include_post_ice=True)
        self.full = fit_map_model(self.model)

    def weighted(self, counts):
        model = self.model.with_stats(group_stats(self.model.design, counts))
        return refit_map(model, self.full.v, self.full.hessian).params

    def leave_one_out(self, i):
        model = self.model.leave_one_out(i)
        return refit_map(model, self.full.v, self.full.hessian).params


def _cmi_estimate(ds, p, rows=None):
    mean, _ = final_visit_moments(ds, p)
    if rows is None:
        return ancova_arrays(mean, ds.baseline, ds.treatment)[0]
    return ancova_arrays(mean[rows], ds.baseline[rows], ds.treatment[rows])[0]


def bcm_cmi(ds, prior=None, se_method="jackknife", b=100, rng=None):
    """Conditional-mean imputation under the MAP causal model + ANCOVA.

    ``se_method='jackknife'`` refits with each patient left out in turn;
    ``'bootstrap'`` uses ``b`` arm-stratified resamples. Intervals are
    ``point +- 1.96 SE``.
    """
    prior = PriorSpec() if prior is None else prior
    fitter = _MapFitter(ds, prior)
    point = _cmi_estimate(ds, fitter.full.params)
    if se_method == "jackknife":
        n = ds.n
        keep = np.ones(n, dtype=bool)
        theta = np.empty(n)
        for i in range(n):
            keep[i] = False
            theta[i] = _cmi_estimate(ds, fitter.leave_one_out(i), keep)
            keep[i] = True
        se = float(np.sqrt((n - 1) / n * np.sum((theta - theta.mean()) ** 2)))
        method = "bcm-cmi-jk"
    elif se_method == "bootstrap":
        rng = np.random.default_rng() if rng is None else rng
        theta = np.empty(b)
        for k, child in enumerate(rng.spawn(b)):
            theta[k] = _bootstrap_once(
                lambda idx, counts, g: _cmi_estimate(ds, fitter.weighted(counts), idx),
                ds, child,
            )
        se = float(theta.std(ddof=1))
        method = "bcm-cmi-bs"
    else:
        raise ValueError("se_method must be 'jackknife' or 'bootstrap'")
    return EstimateReport(method, point, se, point - Z975 * se, point + Z975 * se,
                          dict(n_resamples=int(theta.size)))


def _bootstrap_once(fn, ds, rng):
    """Run ``fn`` on one stratified resample; redraw once on MAP failure."""
    for attempt in range(2):
        idx = stratified_resample(ds.active, rng)
        counts = np.bincount(idx, minlength=ds.n).astype(float)
        try:
            return fn(idx, counts, rng)
        except OptimizationError:
            if attempt:
                raise


def _mi_estimate(ds, p, m, rng, rows=None):
    mean, var = final_visit_moments(ds, p)
    if rows is None:
        rows = np.arange(ds.n)
    mu, sd = mean[rows], np.sqrt(var[rows])
    finals = mu + sd * rng.standard_normal((m, rows.size))
    est, _, _ = ancova_arrays(finals, ds.baseline[rows], ds.treatment[rows])
    return float(np.mean(est))


def bcm_mi_bootstrap(ds, prior=None, b=100, m=25, rng=None):
    """BCM multiple imputation with bootstrap SE.

    For every arm-stratified resample the MAP is refitted, ``m`` final-visit
    imputations are drawn and analysed by ANCOVA, and their mean is that
    resample's estimate. The point estimate applies the same procedure to
    the original data; SE is the SD of the resample estimates and the
    interval ``point +- 1.96 SE``.
    """
    prior = PriorSpec() if prior is None else prior
    rng = np.random.default_rng() if rng is None else rng
    fitter = _MapFitter(ds, prior)
    point_rng, *children = rng.spawn(b + 1)
    point = _mi_estimate(ds, fitter.full.params, m, point_rng)
    theta = np.empty(b)
    for k, child in enumerate(children):
        theta[k] = _bootstrap_once(
            lambda idx, counts, g: _mi_estimate(ds, fitter.weighted(counts), m, g, idx),
            ds, child,
        )
    se = float(theta.std(ddof=1))
    return EstimateReport("bcm-mi-bs", point, se, point - Z975 * se, point + Z975 * se,
                          dict(n_resamples=b, m=m, bootstrap_mean=float(theta.mean())))
