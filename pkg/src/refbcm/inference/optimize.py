"""Posterior-mode (MAP) estimation.

L-BFGS from three deterministic starts, each polished by damped Newton steps
on the exact Hessian until the gradient sup-norm is below ``gtol``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from ..exceptions import NumericalError, OptimizationError
from .density import PosteriorModel, corr_unconstrain
from .priors import PriorSpec

GTOL = 1e-6
MAX_ITER = 500
_LBFGS_WARMUP = 40
_NEWTON_ITER = 50
_REFIT_ITER = 40


@dataclass
class MapResult:
    """Outcome of a MAP fit.

    Attributes
    ----------
    v : ndarray
        Free-parameter vector at the mode.
    params : CausalParams
    logp : float
        Log posterior at the mode (without Jacobian unless requested).
    grad_norm : float
        Sup-norm of the gradient at ``v``.
    start : str
        Name of the winning start.
    hessian : ndarray or None
    runs : list of dict
        Per-start diagnostics.
    """

    v: np.ndarray
    params: object
    logp: float
    grad_norm: float
    start: str
    hessian: np.ndarray | None = None
    runs: list = field(default_factory=list)
    converged: bool = True


def _on_treatment_rows(ds, j):
    """Rows whose visit-``j`` outcome follows the on-treatment model (0-based j)."""
    on = ~ds.active | (ds.d > j)
    return on & ds.observed[:, j]


def moment_start(ds, prior):
    """Per-visit least-squares estimates of intercepts and slopes plus a
    pairwise residual covariance, mapped to the unconstrained scale."""
    j_max = ds.j_max
    mu_a = np.zeros(j_max)
    mu_c = np.zeros(j_max)
    alpha = np.zeros(j_max)
    resid = np.full((ds.n, j_max), np.nan)
    for j in range(j_max):
        rows = _on_treatment_rows(ds, j)
        act = ds.active[rows].astype(float)
        x = np.column_stack([1.0 - act, act, ds.baseline[rows]])
        yj = ds.y[rows, j]
        coef, *_ = np.linalg.lstsq(x, yj, rcond=None)
        if act.sum() == 0:
            coef[1] = coef[0]
        if act.sum() == act.size:
            coef[0] = coef[1]
        mu_c[j], mu_a[j], alpha[j] = coef
        resid[rows, j] = yj - x @ coef
    var = np.nanvar(resid, axis=0)
    var = np.where(np.isfinite(var) & (var > 0), var, 1.0)
    sd = np.sqrt(var)
    corr = np.eye(j_max)
    for a in range(j_max):
        for b in range(a):
            both = np.isfinite(resid[:, a]) & np.isfinite(resid[:, b])
            if both.sum() > 2:
                r = np.corrcoef(resid[both, a], resid[both, b])[0, 1]
                corr[a, b] = corr[b, a] = r if np.isfinite(r) else 0.0
    corr = _nearest_corr(corr)
    return np.concatenate(
        [mu_a, mu_c, alpha, [prior.k0_mean], np.log(sd), corr_unconstrain(corr)]
    )


def _nearest_corr(corr, floor=1e-3):
    w, v = np.linalg.eigh(corr)
    if w[0] >= floor:
        return corr
    fixed = (v * np.maximum(w, floor)) @ v.T
    d = np.sqrt(np.diag(fixed))
    return fixed / np.outer(d, d)


def default_starts(ds, prior, model):
    """Moment-based, zero-effect and perturbed starts (full vectors)."""
    lay = model.layout
    s = lay.slices()
    base = moment_start(ds, prior)
    zero = base.copy()
    pooled = 0.5 * (base[s["mu_active"]] + base[s["mu_control"]])
    zero[s["mu_active"]] = pooled
    zero[s["mu_control"]] = pooled
    zero[s["k0"]] = 0.0
    pert = base.copy()
    shift = 0.1 * np.exp(base[s["log_sd"]])
    pert[s["mu_active"]] += shift
    pert[s["mu_control"]] -= shift
    pert[s["k0"]] = prior.k0_mean + 0.5
    pert[s["corr"]] *= 0.5
    return [("moment", base), ("zero-effect", zero), ("perturbed", pert)]


def _newton_polish(model, v, jacobian, gtol=GTOL, max_iter=_NEWTON_ITER):
    """Damped Newton ascent with an eigenvalue-modified Hessian."""
    val, g = model.logp_and_grad(v, jacobian)
    for it in range(max_iter):
        if np.max(np.abs(g)) < gtol:
            return v, val, g, it, True
        h = model.hessian(v, jacobian)
        w, q = np.linalg.eigh(-h)
        w = np.maximum(w, 1e-8 * max(w.max(), 1.0))
        step = q @ ((q.T @ g) / w)
        t = 1.0
        for _ in range(30):
            v_new = v + t * step
            val_new, g_new = model.logp_and_grad(v_new, jacobian)
            if np.isfinite(val_new) and val_new >= val - 1e-10 * abs(val):
                break
            t *= 0.5
        else:
            return v, val, g, it, False
        v, val, g = v_new, val_new, g_new
    return v, val, g, max_iter, bool(np.max(np.abs(g)) < gtol)


def _run_start(model, v0, jacobian, gtol, max_iter):
    def fun(v):
        val, g = model.logp_and_grad(v, jacobian)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(v)
        return -val, -g

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            fun, v0, jac=True, method="L-BFGS-B",
            options=dict(maxiter=min(max_iter, _LBFGS_WARMUP), maxcor=20, ftol=1e-12, gtol=1e-3),
        )
    if not np.isfinite(res.fun):
        return None, dict(message="non-finite objective", nit=int(res.nit))
    v, val, g, n_newton, ok = _newton_polish(model, res.x, jacobian, gtol)
    info = dict(
        message=str(res.message), nit=int(res.nit), newton=n_newton,
        logp=float(val), grad_norm=float(np.max(np.abs(g))), converged=ok,
    )
    return (v, val, g, ok), info


def fit_map_model(model, starts=None, jacobian=False, gtol=GTOL, max_iter=MAX_ITER,
                  keep_hessian=True):
    """MAP of a bound :class:`PosteriorModel`; returns :class:`MapResult`."""
    if starts is None:
        starts = default_starts(model.ds, model.prior, model)
    best = None
    runs = []
    for name, u0 in starts:
        try:
            out, info = _run_start(model, model.to_free(u0), jacobian, gtol, max_iter)
        except NumericalError as exc:
            out, info = None, dict(message=str(exc))
        info["start"] = name
        runs.append(info)
        if out is None or not out[3]:
            continue
        if best is None or out[1] > best[1]:
            best = out + (name,)
    if best is None:
        raise OptimizationError("MAP optimisation failed from every start", runs)
    v, val, g, _, name = best
    hess = model.hessian(v, jacobian) if keep_hessian else None
    return MapResult(
        v=v, params=model.params(v), logp=val, grad_norm=float(np.max(np.abs(g))),
        start=name, hessian=hess, runs=runs,
    )


def refit_map(model, v0, hessian, jacobian=False, gtol=GTOL):
    """Warm-started MAP for a perturbed model (jackknife / bootstrap).

    Iterates ``v <- v + (-H0)^{-1} g(v)`` with the reference Hessian held
    fixed, then falls back to Newton and finally to a full multi-start fit.
    """
    try:
        chol = np.linalg.cholesky(-hessian)
    except np.linalg.LinAlgError:
        chol = None
    v = np.asarray(v0, dtype=float).copy()
    if chol is not None:
        from scipy.linalg import cho_solve

        val, g = model.logp_and_grad(v, jacobian)
        for _ in range(_REFIT_ITER):
            if not np.isfinite(val):
                break
            if np.max(np.abs(g)) < gtol:
                return MapResult(v, model.params(v), val, float(np.max(np.abs(g))), "warm")
            v = v + cho_solve((chol, True), g)
            val, g = model.logp_and_grad(v, jacobian)
        v = np.asarray(v0, dtype=float).copy()
    v, val, g, _, ok = _newton_polish(model, v, jacobian, gtol)
    if ok:
        return MapResult(v, model.params(v), val, float(np.max(np.abs(g))), "warm-newton")
    return fit_map_model(model, jacobian=jacobian, gtol=gtol, keep_hessian=False)


def fit_map(ds, prior=None, include_post_ice=True, fixed_k0=None, jacobian=False,
            full_output=False):
    """Posterior mode of the causal model (``pi`` excluded).

    Parameters
    ----------
    ds : TrialDataset
    prior : PriorSpec, optional
    include_post_ice : bool
    fixed_k0 : float, optional
        Hold ``k0`` fixed instead of estimating it.
    jacobian : bool
        Maximise the density of the unconstrained vector (including the
        transform Jacobian) instead of the posterior in natural coordinates.
    full_output : bool
        Return the :class:`MapResult` rather than only the parameters.

    Raises
    ------
    OptimizationError
        No start reached a gradient sup-norm below 1e-6.
    """
    prior = PriorSpec() if prior is None else prior
    model = PosteriorModel(ds, prior, include_post_ice, fixed_k0=fixed_k0)
    res = fit_map_model(model, jacobian=jacobian)
    return res if full_output else res.params
