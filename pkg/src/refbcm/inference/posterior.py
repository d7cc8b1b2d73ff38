"""Posterior sampling of the causal model and the BCM policy-effect estimate."""

from __future__ import annotations

import csv
import warnings

import numpy as np

from ..analysis import EstimateReport
from ..causal import CausalParams, policy_effect_draws
from ..exceptions import ConvergenceWarning
from .density import ParamLayout, PosteriorModel, sigma_batch
from .diagnostics import ESS_MIN, RHAT_MAX, summarize_chains
from .nuts import run_chain
from .optimize import fit_map_model
from .priors import PriorSpec


class PosteriorDraws:
    """Retained posterior draws (chains stacked, chain-major).

    Attributes
    ----------
    unconstrained : ndarray (S, size)
        Draws on the unconstrained scale.
    mu_active, mu_control, alpha : ndarray (S, j_max)
    k0 : ndarray (S,)
    diagnostics : dict
        ``{name: {"rhat": float, "ess": float}}`` per sampled coordinate.
    converged : bool
        False when a monitored parameter misses the R-hat/ESS targets.
    meta : dict
        Warmup, chain count, seed, thinning and sampler statistics.
    """

    def __init__(self, unconstrained, j_max, n_chains, diagnostics=None, converged=True,
                 meta=None):
        u = np.asarray(unconstrained, dtype=float)
        if u.ndim != 2 or u.shape[0] == 0:
            raise ValueError("need a non-empty (draws, dim) array")
        self.unconstrained = u
        self.j_max = int(j_max)
        self.n_chains = int(n_chains)
        s = ParamLayout(self.j_max).slices()
        self.mu_active = u[:, s["mu_active"]]
        self.mu_control = u[:, s["mu_control"]]
        self.alpha = u[:, s["alpha"]]
        self.k0 = u[:, s["k0"]][:, 0]
        self.diagnostics = diagnostics or {}
        self.converged = bool(converged)
        self.meta = meta or {}
        self._sigma = None
        self._params = None

    def __len__(self):
        return self.unconstrained.shape[0]

    @property
    def sigma(self):
        if self._sigma is None:
            self._sigma = sigma_batch(self.unconstrained, self.j_max)
        return self._sigma

    @property
    def draws(self):
        """Draws as a list of :class:`CausalParams` (built lazily)."""
        if self._params is None:
            self._params = [
                CausalParams(self.mu_active[i], self.mu_control[i], self.alpha[i],
                             self.sigma[i], self.k0[i])
                for i in range(len(self))
            ]
        return self._params

    def chain_view(self, x):
        """Reshape a per-draw array to (chains, draws per chain, ...)."""
        x = np.asarray(x)
        return x.reshape((self.n_chains, -1) + x.shape[1:])

    def to_csv(self, path):
        """One row per draw with flattened parameters."""
        j = self.j_max
        header = ["draw", "chain"]
        header += [f"mu_active[{i + 1}]" for i in range(j)]
        header += [f"mu_control[{i + 1}]" for i in range(j)]
        header += [f"alpha[{i + 1}]" for i in range(j)]
        header += ["k0"]
        tri = [(a, b) for a in range(j) for b in range(a, j)]
        header += [f"sigma[{a + 1},{b + 1}]" for a, b in tri]
        per_chain = len(self) // self.n_chains
        sig = self.sigma
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [i, i // per_chain]
                row += [repr(float(v)) for v in self.mu_active[i]]
                row += [repr(float(v)) for v in self.mu_control[i]]
                row += [repr(float(v)) for v in self.alpha[i]]
                row += [repr(float(self.k0[i]))]
                row += [repr(float(sig[i, a, b])) for a, b in tri]
                w.writerow(row)


def _laplace_metric(hessian):
    w, q = np.linalg.eigh(-hessian)
    floor = 1e-10 * max(w.max(), 1.0)
    w = np.maximum(w, floor)
    return (q / w) @ q.T


def sample_posterior(ds, prior=None, include_post_ice=True, chains=2, warmup=300, keep=1000,
                     seed=0, thin=1, fixed_k0=None, adapt_metric=False, target_accept=0.8):
    """Draw from the posterior of the causal model by NUTS.

    Chains start from independent draws of the Laplace approximation at the
    mode of the unconstrained density, whose inverse Hessian also serves as
    the (dense) inverse metric. ``pi`` is not sampled here.

    Parameters
    ----------
    ds : TrialDataset
    prior : PriorSpec, optional
    include_post_ice : bool
    chains, warmup, keep, thin : int
    seed : int
        Chain ``c`` uses the stream ``SeedSequence([seed, c])``.
    fixed_k0 : float, optional
        Hold ``k0`` at this value.

    Returns
    -------
    PosteriorDraws
        ``converged`` is False (and a :class:`ConvergenceWarning` is issued)
        if any mean intercept or ``k0`` has split-R-hat >= 1.01 or bulk ESS
        below 400.
    """
    prior = PriorSpec() if prior is None else prior
    model = PosteriorModel(ds, prior, include_post_ice, fixed_k0=fixed_k0)
    mode = fit_map_model(model, jacobian=True)
    inv_metric = _laplace_metric(mode.hessian)
    chol = np.linalg.cholesky(inv_metric)

    def target(v):
        val, g = model.logp_and_grad(v, True)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            return -np.inf, np.zeros_like(v)
        return val, g

    all_draws = []
    stats = []
    for c in range(chains):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), c]))
        init = mode.v + chol @ rng.standard_normal(model.dim)
        if not np.isfinite(target(init)[0]):
            init = mode.v.copy()
        draws, st = run_chain(target, init, inv_metric, warmup, keep, rng, thin=thin,
                              adapt_metric=adapt_metric, target_accept=target_accept)
        all_draws.append(draws)
        stats.append(st)
    free = np.stack(all_draws)
    full = np.array([model.to_full(v) for v in free.reshape(-1, model.dim)])

    names = ParamLayout(ds.j_max).names()
    if not model.k0_free:
        names = [n for n in names if n != "k0"]
    if keep >= 8:
        diag = summarize_chains(free, names)
    else:
        # split halves need 4 draws each; shorter runs stay undiagnosed
        diag = {n: dict(rhat=np.nan, ess=np.nan) for n in names}
    monitored = [n for n in names if n.startswith("mu_") or n == "k0"]
    bad = [n for n in monitored
           if not (diag[n]["rhat"] < RHAT_MAX and diag[n]["ess"] >= ESS_MIN)]
    if bad:
        warnings.warn(
            f"posterior diagnostics outside targets for {', '.join(bad)}",
            ConvergenceWarning, stacklevel=2,
        )
    meta = dict(
        warmup=warmup, chains=chains, keep=keep, thin=thin, seed=seed,
        step_size=[float(s["step_size"]) for s in stats],
        divergences=int(sum(s["divergent"].sum() for s in stats)),
        mean_accept=float(np.mean([s["accept_stat"].mean() for s in stats])),
        mean_tree_depth=float(np.mean([s["tree_depth"].mean() for s in stats])),
        n_leapfrog=int(sum(s["n_leapfrog"].sum() for s in stats)),
        include_post_ice=bool(include_post_ice),
        fixed_k0=fixed_k0,
        unconverged=bad,
    )
    return PosteriorDraws(full, ds.j_max, chains, diag, converged=not bad, meta=meta)


def sample_pi(ds, dirichlet_alpha, n_draws, rng):
    """Conjugate Dirichlet draws of the active-arm ICE-visit proportions.

    Parameters
    ----------
    ds : TrialDataset
    dirichlet_alpha : float or array_like (j_max,)
    n_draws : int
    rng : numpy.random.Generator

    Returns
    -------
    ndarray (n_draws, j_max)
    """
    if not ds.active.any():
        raise ValueError("active arm is empty")
    j_max = ds.j_max
    alpha = np.broadcast_to(np.asarray(dirichlet_alpha, dtype=float), (j_max,))
    if np.any(alpha <= 0):
        raise ValueError("dirichlet_alpha must be positive")
    counts = np.bincount(ds.d[ds.active] - 1, minlength=j_max)[:j_max]
    return rng.dirichlet(alpha + counts, size=int(n_draws))


def estimate_effect_bcm(draws, pi_draws, mean_baseline=0.0):
    """Posterior summary of the treatment-policy effect.

    Draw ``l`` of the causal parameters is paired with ``pi_draws[l]``.
    The point estimate is the posterior mean, the SE the posterior SD and
    the interval the 2.5%/97.5% posterior quantiles; ``aux`` also carries
    the ``mean +- 1.96 SD`` interval.
    """
    pi_draws = np.asarray(pi_draws, dtype=float)
    if pi_draws.shape[0] != len(draws):
        raise ValueError(
            f"got {len(draws)} parameter draws but {pi_draws.shape[0]} pi draws"
        )
    effects = policy_effect_draws(draws.mu_active, draws.mu_control, draws.k0, pi_draws)
    point = float(effects.mean())
    se = float(effects.std(ddof=1)) if effects.size > 1 else 0.0
    lo, hi = np.quantile(effects, [0.025, 0.975])
    aux = dict(
        n_draws=int(effects.size),
        normal_low=point - 1.959963984540054 * se,
        normal_high=point + 1.959963984540054 * se,
        converged=bool(getattr(draws, "converged", True)),
    )
    meta = getattr(draws, "meta", {})
    for key in ("divergences", "mean_accept", "unconverged"):
        if key in meta:
            aux[key] = meta[key]
    return EstimateReport("bcm", point, se, float(lo), float(hi), aux)


def fit_bcm(ds, prior=None, chains=2, warmup=300, keep=1000, seed=0, include_post_ice=True):
    """Full Bayesian estimate of the treatment-policy effect."""
    prior = PriorSpec() if prior is None else prior
    draws = sample_posterior(ds, prior, include_post_ice, chains, warmup, keep, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 104729]))
    pi = sample_pi(ds, prior.dirichlet_vector(ds.j_max), len(draws), rng)
    return estimate_effect_bcm(draws, pi, float(np.mean(ds.baseline)))
