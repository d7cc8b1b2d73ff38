"""Split-R-hat and rank-normalised bulk effective sample size."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import fft, special, stats

from ..exceptions import ConvergenceWarning

RHAT_MAX = 1.01
ESS_MIN = 400


def _as_chains(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected an array of shape (chains, draws)")
    if x.shape[1] < 4:
        raise ValueError("chains must have at least 4 draws")
    return x


def split_chains(x):
    """Halve every chain (dropping the middle draw of odd-length chains)."""
    x = _as_chains(x)
    n = x.shape[1]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def split_rhat(x):
    """Classic potential scale reduction factor on split chains.

    Returns NaN (with a warning) when every draw is identical.
    """
    s = split_chains(x)
    m, n = s.shape
    within = s.var(axis=1, ddof=1).mean()
    if within == 0.0 or not np.isfinite(within):
        warnings.warn("R-hat undefined for constant chains", ConvergenceWarning, stacklevel=2)
        return np.nan
    between = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _autocov(x):
    """Biased autocovariance of each row, by FFT."""
    m, n = x.shape
    size = fft.next_fast_len(2 * n)
    xc = x - x.mean(axis=1, keepdims=True)
    f = fft.rfft(xc, n=size, axis=1)
    ac = fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def ess_raw(x):
    """ESS via Geyer's initial monotone sequence on multiple chains."""
    x = _as_chains(x)
    m, n = x.shape
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if var_plus <= 0:
        return np.nan
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_odd > 0:
        rho[max_t + 1] = rho_odd
    # enforce a monotone sequence of pair sums
    t = 1
    while t <= max_t - 2:
        pair = rho[t + 1] + rho[t + 2]
        prev = rho[t - 1] + rho[t]
        if pair > prev:
            rho[t + 1] = prev / 2.0
            rho[t + 2] = prev / 2.0
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * np.sum(rho[: max_t + 1]) + np.sum(rho[max_t + 1: max_t + 2])
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def rank_normalize(x):
    """Normal scores of the pooled fractional ranks (ties averaged)."""
    x = np.asarray(x, dtype=float)
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((r - 0.375) / (x.size + 0.25))


def ess_bulk(x):
    """Rank-normalised bulk ESS on split chains."""
    s = split_chains(x)
    if np.all(s == s.flat[0]):
        return np.nan
    return ess_raw(rank_normalize(s))


def summarize_chains(draws, names=None):
    """Per-parameter R-hat and bulk ESS for draws of shape (chains, n, dim)."""
    draws = np.asarray(draws, dtype=float)
    dim = draws.shape[2]
    names = names or [f"x[{i}]" for i in range(dim)]
    rhat = np.empty(dim)
    ess = np.empty(dim)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for i in range(dim):
            rhat[i] = split_rhat(draws[:, :, i])
            ess[i] = ess_bulk(draws[:, :, i])
    return {name: dict(rhat=float(rhat[i]), ess=float(ess[i])) for i, name in enumerate(names)}
