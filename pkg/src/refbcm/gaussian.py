"""Dense multivariate-normal utilities: covariance construction, conditioning,
sampling and log-density. All solves go through Cholesky factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import NumericalError

LOG_2PI = np.log(2.0 * np.pi)
_SYM_RTOL = 1e-12
_PSD_RTOL = 1e-10
_MAX_COND = 1e12


def check_cov(cov, name="cov"):
    """Validate a covariance matrix (square, symmetric to 1e-12 relative).

    Returns the symmetrised float array.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.all(np.isfinite(cov)):
        raise NumericalError(f"{name} has non-finite entries")
    scale = max(np.abs(cov).max(), np.finfo(float).tiny)
    if np.abs(cov - cov.T).max() > _SYM_RTOL * scale:
        raise ValueError(f"{name} is not symmetric")
    return 0.5 * (cov + cov.T)


def safe_cholesky(cov):
    """Lower Cholesky factor; adds ``1e-10 * trace / dim`` jitter once on failure."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    dim = cov.shape[0]
    jitter = 1e-10 * np.trace(cov) / max(dim, 1)
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(dim))
    except np.linalg.LinAlgError:
        raise NumericalError("covariance matrix is not positive definite") from None


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    """A Gaussian given by its mean and (PSD) covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("mean and cov dimensions differ")
        cov = check_cov(cov)
        if cov.size:
            eig = np.linalg.eigvalsh(cov)
            if eig[0] < -_PSD_RTOL * max(eig[-1], 0.0) - 1e-300:
                raise NumericalError("conditional covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]


def spatial_power_cov(variances, times, rho):
    """Spatial-power covariance, correlation ``rho ** (|t_i - t_j| / 4)``.

    Parameters
    ----------
    variances : array_like
        Marginal variances, all positive.
    times : array_like
        Strictly increasing visit times in weeks.
    rho : float
        Correlation per four weeks, in (0, 1).
    """
    v = np.asarray(variances, dtype=float)
    t = np.asarray(times, dtype=float)
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if v.shape != t.shape or v.ndim != 1:
        raise ValueError("variances and times must be 1-D of equal length")
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    lag = np.abs(t[:, None] - t[None, :]) / 4.0
    cov = rho**lag * np.sqrt(np.outer(v, v))
    np.fill_diagonal(cov, v)
    return cov


def mvn_condition(mean, cov, obs_idx, obs_vals):
    """Distribution of the unobserved components given the observed ones.

    The conditional mean is ``mu_u + B (x_o - mu_o)`` with regression matrix
    ``B = S_uo S_oo^{-1}`` and the conditional covariance is the Schur
    complement ``S_uu - S_uo S_oo^{-1} S_ou``. Components are returned in
    increasing index order.
    """
    mean = np.asarray(mean, dtype=float)
    cov = check_cov(cov)
    dim = mean.shape[0]
    obs_idx = np.unique(np.asarray(obs_idx, dtype=int))
    if obs_idx.size == 0 or obs_idx.size >= dim:
        raise ValueError("obs_idx must be a non-empty proper subset")
    if obs_idx[0] < 0 or obs_idx[-1] >= dim:
        raise IndexError("obs_idx out of range")
    obs_vals = np.asarray(obs_vals, dtype=float)
    if obs_vals.shape != obs_idx.shape:
        raise ValueError("obs_vals length must match obs_idx")
    unobs = np.setdiff1d(np.arange(dim), obs_idx)
    s_oo = cov[np.ix_(obs_idx, obs_idx)]
    if np.linalg.cond(s_oo) > _MAX_COND:
        raise NumericalError("observed covariance block is singular")
    s_uo = cov[np.ix_(unobs, obs_idx)]
    chol = safe_cholesky(s_oo)
    # B^T = S_oo^{-1} S_ou
    bt = linalg.cho_solve((chol, True), s_uo.T)
    cmean = mean[unobs] + bt.T @ (obs_vals - mean[obs_idx])
    ccov = cov[np.ix_(unobs, unobs)] - s_uo @ bt
    return ConditionalGaussian(cmean, 0.5 * (ccov + ccov.T))


def mvn_logpdf(x, mean, cov):
    """Exact Gaussian log-density via a Cholesky factor."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(check_cov(cov))
    if x.shape != mean.shape or cov.shape != (x.shape[0], x.shape[0]):
        raise ValueError("dimension mismatch")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance matrix is not positive definite") from None
    z = linalg.solve_triangular(chol, x - mean, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (x.shape[0] * LOG_2PI + logdet + z @ z))


def mvn_sample(g, rng, size=None):
    """Draw from ``g``; zero covariance returns the mean exactly.

    ``rng`` is a ``numpy.random.Generator`` owned by the caller.
    """
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    if not np.any(g.cov):
        return np.broadcast_to(g.mean, shape + g.mean.shape).copy()
    factor = _psd_factor(g.cov)
    z = rng.standard_normal(shape + (factor.shape[1],))
    return g.mean + z @ factor.T


def _psd_factor(cov):
    """Matrix ``F`` with ``F F^T = cov`` for PSD (possibly singular) ``cov``."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))
