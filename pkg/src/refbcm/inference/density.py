"""Log posterior of the causal model on an unconstrained scale.

Every patient contributes a Gaussian log-density on the outcomes that enter
the likelihood; the mean depends on arm, discontinuation visit and (for
retrieved post-ICE blocks) ``k0``, while the covariance is the shared
``Sigma`` restricted to the patient's contributing visits. Patients with the
same (arm, ICE visit, contributing-visit mask) share that Gaussian, so the
likelihood reduces to per-group sufficient statistics
``n_g`` and ``M_g = sum z z^T`` with ``z = (y_masked, baseline, 1)``; a
density evaluation then costs O(groups) not O(patients).

Unconstrained layout (``J = j_max``)::

    mu_active (J) | mu_control (J) | alpha (J) | k0 (1) | log sd (J) | corr (J(J-1)/2)

The correlation coordinates are mapped through ``tanh`` onto canonical
partial correlations and then onto the Cholesky factor of the correlation
matrix; the log-Jacobian of the whole map is added when sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from ..causal import CausalParams
from ..exceptions import NumericalError
from ..gaussian import LOG_2PI
from .priors import PriorSpec

jax.config.update("jax_enable_x64", True)

_LOG_2 = float(np.log(2.0))
_GROUP_BUCKET = 8


@dataclass(frozen=True)
class ParamLayout:
    """Index bookkeeping for the unconstrained vector."""

    j_max: int

    @property
    def n_corr(self):
        return self.j_max * (self.j_max - 1) // 2

    @property
    def size(self):
        return 4 * self.j_max + 1 + self.n_corr

    @property
    def k0_index(self):
        return 3 * self.j_max

    def slices(self):
        j = self.j_max
        return {
            "mu_active": slice(0, j),
            "mu_control": slice(j, 2 * j),
            "alpha": slice(2 * j, 3 * j),
            "k0": slice(3 * j, 3 * j + 1),
            "log_sd": slice(3 * j + 1, 4 * j + 1),
            "corr": slice(4 * j + 1, self.size),
        }

    def names(self):
        j = self.j_max
        out = [f"mu_active[{i + 1}]" for i in range(j)]
        out += [f"mu_control[{i + 1}]" for i in range(j)]
        out += [f"alpha[{i + 1}]" for i in range(j)]
        out += ["k0"]
        out += [f"log_sd[{i + 1}]" for i in range(j)]
        out += [f"corr_z[{r + 1},{c + 1}]" for r in range(1, j) for c in range(r)]
        return out


# -- correlation transform -------------------------------------------------


def _log1m_tanh2(z):
    # log(1 - tanh(z)^2) without cancellation for large |z|
    a = jnp.abs(z)
    return 2.0 * (_LOG_2 - a - jnp.log1p(jnp.exp(-2.0 * a)))


def _corr_cholesky(z, j_max):
    """Cholesky factor of a correlation matrix and ``log |dL/dz|``.

    Lower-triangle coordinates are consumed row by row.
    """
    w = jnp.tanh(z)
    logjac = jnp.sum(_log1m_tanh2(z))
    rows = [[jnp.ones(())] + [jnp.zeros(())] * (j_max - 1)]
    k = 0
    for i in range(1, j_max):
        row = []
        sum_sq = jnp.zeros(())
        for j in range(i):
            if j > 0:
                logjac = logjac + 0.5 * jnp.log1p(-sum_sq)
            val = w[k] * jnp.sqrt(1.0 - sum_sq)
            k += 1
            row.append(val)
            sum_sq = sum_sq + val * val
        row.append(jnp.sqrt(1.0 - sum_sq))
        row += [jnp.zeros(())] * (j_max - i - 1)
        rows.append(row)
    chol = jnp.stack([jnp.stack(r) for r in rows])
    return chol, logjac


def corr_cholesky_np(z, j_max):
    """NumPy version of the forward correlation transform (no Jacobian)."""
    w = np.tanh(np.asarray(z, dtype=float))
    chol = np.zeros((j_max, j_max))
    chol[0, 0] = 1.0
    k = 0
    for i in range(1, j_max):
        sum_sq = 0.0
        for j in range(i):
            chol[i, j] = w[k] * np.sqrt(1.0 - sum_sq)
            sum_sq += chol[i, j] ** 2
            k += 1
        chol[i, i] = np.sqrt(max(1.0 - sum_sq, 0.0))
    return chol


def corr_unconstrain(corr):
    """Inverse of the correlation transform."""
    corr = np.asarray(corr, dtype=float)
    j_max = corr.shape[0]
    chol = np.linalg.cholesky(corr)
    # renormalise rows so that diag(L L^T) is exactly one
    chol = chol / np.sqrt(np.sum(chol**2, axis=1))[:, None]
    out = []
    for i in range(1, j_max):
        sum_sq = 0.0
        for j in range(i):
            w = chol[i, j] / np.sqrt(1.0 - sum_sq)
            out.append(np.arctanh(np.clip(w, -1 + 1e-15, 1 - 1e-15)))
            sum_sq += chol[i, j] ** 2
    return np.array(out)


def to_unconstrained(p: CausalParams):
    """Map causal parameters (pi ignored) onto the unconstrained vector."""
    sd = np.sqrt(np.diag(p.sigma))
    corr = p.sigma / np.outer(sd, sd)
    return np.concatenate(
        [p.mu_active, p.mu_control, p.alpha, [p.k0], np.log(sd), corr_unconstrain(corr)]
    )


def from_unconstrained(u, j_max):
    """Map an unconstrained vector back to :class:`CausalParams` (no pi)."""
    u = np.asarray(u, dtype=float)
    lay = ParamLayout(j_max)
    if u.shape != (lay.size,):
        raise ValueError(f"expected a vector of length {lay.size}, got {u.shape}")
    s = lay.slices()
    sd = np.exp(u[s["log_sd"]])
    chol = corr_cholesky_np(u[s["corr"]], j_max) * sd[:, None]
    sigma = chol @ chol.T
    return CausalParams(
        mu_active=u[s["mu_active"]],
        mu_control=u[s["mu_control"]],
        alpha=u[s["alpha"]],
        sigma=0.5 * (sigma + sigma.T),
        k0=float(u[s["k0"]][0]),
    )


def sigma_batch(u_draws, j_max):
    """Covariance matrices for a stack of unconstrained vectors."""
    s = ParamLayout(j_max).slices()
    u_draws = np.atleast_2d(u_draws)
    out = np.empty((u_draws.shape[0], j_max, j_max))
    for i, u in enumerate(u_draws):
        sd = np.exp(u[s["log_sd"]])
        chol = corr_cholesky_np(u[s["corr"]], j_max) * sd[:, None]
        out[i] = chol @ chol.T
    return out


# -- grouped sufficient statistics -------------------------------------------


@dataclass(frozen=True, eq=False)
class GroupDesign:
    """Patient-to-group assignment and per-group mean structure.

    Attributes
    ----------
    group : ndarray (n,)
        Group index of every patient.
    z : ndarray (n, J + 2)
        ``(y on contributing visits else 0, baseline, 1)``.
    mask : ndarray (G, J)
        1 where the visit contributes to the likelihood.
    src_active : ndarray (G, J)
        1 where the mean follows the active profile.
    post : ndarray (G, J)
        1 where the ``k0 * delta_d`` shift applies.
    d_index : ndarray (G,)
        0-based index of the last on-treatment visit for shifted groups.
    """

    group: np.ndarray
    z: np.ndarray
    mask: np.ndarray
    src_active: np.ndarray
    post: np.ndarray
    d_index: np.ndarray

    @property
    def n_groups(self):
        return self.mask.shape[0]

    @property
    def j_max(self):
        return self.mask.shape[1]

    def patient_mask(self, i):
        return self.mask[self.group[i]].astype(bool)


def build_design(ds, include_post_ice=True):
    """Group patients by the Gaussian their likelihood term uses."""
    j_max = ds.j_max
    obs = ds.observed
    keys = {}
    group = np.empty(ds.n, dtype=np.int64)
    rows = []
    visits = np.arange(1, j_max + 1)
    for i in range(ds.n):
        d = int(ds.d[i])
        if not ds.active[i]:
            mask = obs[i]
            key = (0, 0, mask.tobytes())
            spec = (mask, np.zeros(j_max, bool), np.zeros(j_max, bool), 0)
        elif d < j_max and include_post_ice and obs[i, d:].all():
            mask = obs[i]
            key = (1, d, mask.tobytes())
            spec = (mask, visits <= d, visits > d, d - 1)
        else:
            # on-treatment block only; any post-ICE values are ignored
            mask = obs[i] & (visits <= d)
            key = (1, 0, mask.tobytes())
            spec = (mask, np.ones(j_max, bool), np.zeros(j_max, bool), 0)
        g = keys.get(key)
        if g is None:
            g = keys[key] = len(rows)
            rows.append(spec)
        group[i] = g
    mask = np.array([r[0] for r in rows], dtype=float)
    z = np.zeros((ds.n, j_max + 2))
    pm = mask[group].astype(bool)
    z[:, :j_max] = np.where(pm, np.nan_to_num(ds.y), 0.0)
    z[:, j_max] = ds.baseline
    z[:, j_max + 1] = 1.0
    return GroupDesign(
        group=group,
        z=z,
        mask=mask,
        src_active=np.array([r[1] for r in rows], dtype=float),
        post=np.array([r[2] for r in rows], dtype=float),
        d_index=np.array([r[3] for r in rows], dtype=np.int64),
    )


@dataclass(frozen=True, eq=False)
class GroupStats:
    """Padded per-group sufficient statistics fed to the compiled density."""

    n: np.ndarray
    m: np.ndarray
    mask: np.ndarray
    src_active: np.ndarray
    post: np.ndarray
    d_index: np.ndarray

    def arrays(self):
        return (self.n, self.m, self.mask, self.src_active, self.post, self.d_index)


def group_stats(design: GroupDesign, weights=None):
    """Sufficient statistics, optionally with per-patient frequency weights."""
    g_count = design.n_groups
    w = np.ones(design.group.shape[0]) if weights is None else np.asarray(weights, float)
    n = np.bincount(design.group, weights=w, minlength=g_count)
    m = np.zeros((g_count, design.z.shape[1], design.z.shape[1]))
    order = np.argsort(design.group, kind="stable")
    bounds = np.searchsorted(design.group[order], np.arange(g_count + 1))
    for g in range(g_count):
        idx = order[bounds[g]:bounds[g + 1]]
        zg = design.z[idx]
        m[g] = (zg * w[idx, None]).T @ zg
    return _pad(design, n, m)


def _pad(design, n, m):
    g_count = design.n_groups
    size = -(-g_count // _GROUP_BUCKET) * _GROUP_BUCKET
    extra = size - g_count
    j_max = design.j_max

    def grow(a, fill=0.0):
        if not extra:
            return a
        pad = np.full((extra,) + a.shape[1:], fill, dtype=a.dtype)
        return np.concatenate([a, pad])

    # padded groups have no patients and an all-zero mask, so they add nothing
    return GroupStats(
        n=grow(n),
        m=grow(m),
        mask=grow(design.mask),
        src_active=grow(design.src_active),
        post=grow(design.post),
        d_index=grow(design.d_index, 0),
    )


def leave_one_out(stats: GroupStats, design: GroupDesign, i):
    """Statistics with patient ``i`` removed."""
    g = design.group[i]
    n = stats.n.copy()
    m = stats.m.copy()
    n[g] -= 1.0
    m[g] -= np.outer(design.z[i], design.z[i])
    return GroupStats(n, m, stats.mask, stats.src_active, stats.post, stats.d_index)


# -- compiled density ---------------------------------------------------------


def _batched_cholesky(a, dim):
    """Unrolled Cholesky for a stack of small matrices (faster than LAPACK batches)."""
    cols = [[None] * dim for _ in range(dim)]
    for j in range(dim):
        s = a[:, j, j]
        for k in range(j):
            s = s - cols[j][k] ** 2
        ljj = jnp.sqrt(s)
        cols[j][j] = ljj
        for i in range(j + 1, dim):
            s = a[:, i, j]
            for k in range(j):
                s = s - cols[i][k] * cols[j][k]
            cols[i][j] = s / ljj
    diag = jnp.stack([cols[j][j] for j in range(dim)], axis=1)
    return cols, diag


def _forward_solve(cols, b, dim):
    """Solve ``L x = b`` for stacked ``b`` of shape (G, dim, k)."""
    xs = []
    for i in range(dim):
        s = b[:, i, :]
        for k in range(i):
            s = s - cols[i][k][:, None] * xs[k]
        xs.append(s / cols[i][i][:, None])
    return jnp.stack(xs, axis=1)


def _unpack(u, j_max):
    s = ParamLayout(j_max).slices()
    mu_a = u[s["mu_active"]]
    mu_c = u[s["mu_control"]]
    alpha = u[s["alpha"]]
    k0 = u[s["k0"]][0]
    log_sd = u[s["log_sd"]]
    corr_l, logjac_corr = _corr_cholesky(u[s["corr"]], j_max)
    return mu_a, mu_c, alpha, k0, log_sd, corr_l, logjac_corr


def _group_loglik(mu_a, mu_c, alpha, k0, sigma, stats):
    n, m, mask, src, post, d_idx = stats
    j_max = mu_a.shape[0]
    delta = mu_a - mu_c
    mean = src * mu_a + (1.0 - src) * mu_c + post * (k0 * delta[d_idx])[:, None]
    g_count = mask.shape[0]
    eye = jnp.eye(j_max)
    # residual map r = A z with A = [I, -alpha, -mean], rows masked
    a = jnp.concatenate(
        [
            jnp.broadcast_to(eye, (g_count, j_max, j_max)),
            jnp.broadcast_to(-alpha[None, :, None], (g_count, j_max, 1)),
            -mean[:, :, None],
        ],
        axis=2,
    )
    a = a * mask[:, :, None]
    outer = mask[:, :, None] * mask[:, None, :]
    cov = sigma[None] * outer + eye[None] * (1.0 - mask)[:, :, None]
    cols, diag = _batched_cholesky(cov, j_max)
    w = _forward_solve(cols, a, j_max)
    quad = jnp.einsum("gik,gkl,gil->g", w, m, w)
    logdet = 2.0 * jnp.sum(jnp.log(diag), axis=1)
    k = jnp.sum(mask, axis=1)
    return jnp.sum(-0.5 * n * (k * LOG_2PI + logdet) - 0.5 * quad)


def _log_prior(mu_a, mu_c, alpha, k0, log_sd, corr_l, hyper):
    mu_sd, alpha_sd, k0_mean, k0_sd, sd_scale, eta = (hyper[i] for i in range(6))
    j_max = mu_a.shape[0]

    def normal(x, loc, scale):
        return jnp.sum(-0.5 * ((x - loc) / scale) ** 2 - jnp.log(scale) - 0.5 * LOG_2PI)

    lp = normal(mu_a, 0.0, mu_sd) + normal(mu_c, 0.0, mu_sd)
    lp = lp + normal(alpha, 0.0, alpha_sd) + normal(k0, k0_mean, k0_sd)
    sd = jnp.exp(log_sd)
    # half-normal on each marginal SD
    lp = lp + j_max * _LOG_2 + normal(sd, 0.0, sd_scale)
    # LKJ(eta), up to its normalising constant
    log_diag = jnp.log(jnp.diagonal(corr_l))
    lp = lp + (eta - 1.0) * 2.0 * jnp.sum(log_diag)
    return lp, log_diag


def _log_post_full(u, stats, hyper, j_max, jacobian):
    mu_a, mu_c, alpha, k0, log_sd, corr_l, logjac_corr = _unpack(u, j_max)
    chol = corr_l * jnp.exp(log_sd)[:, None]
    sigma = chol @ chol.T
    ll = _group_loglik(mu_a, mu_c, alpha, k0, sigma, stats)
    lp, log_diag = _log_prior(mu_a, mu_c, alpha, k0, log_sd, corr_l, hyper)
    out = ll + lp
    if jacobian:
        # d sd / d log sd, then R <- L, then L <- z
        powers = j_max - 1.0 - jnp.arange(j_max)
        out = out + jnp.sum(log_sd) + jnp.sum(powers[1:] * log_diag[1:]) + logjac_corr
    return out


def _expand(v, k0_fixed, j_max, k0_free):
    if k0_free:
        return v
    k = 3 * j_max
    return jnp.concatenate([v[:k], jnp.reshape(k0_fixed, (1,)), v[k:]])


def _objective(v, k0_fixed, stats, hyper, j_max, jacobian, k0_free):
    u = _expand(v, k0_fixed, j_max, k0_free)
    return _log_post_full(u, stats, hyper, j_max, jacobian)


_STATIC = ("j_max", "jacobian", "k0_free")
_value_fn = jax.jit(_objective, static_argnames=_STATIC)
_value_grad_fn = jax.jit(jax.value_and_grad(_objective), static_argnames=_STATIC)
_hessian_fn = jax.jit(jax.hessian(_objective), static_argnames=_STATIC)
_loglik_fn = jax.jit(
    lambda u, stats, j_max: _group_loglik(*_unpack(u, j_max)[:4], _sigma_of(u, j_max), stats),
    static_argnames=("j_max",),
)


def _sigma_of(u, j_max):
    _, _, _, _, log_sd, corr_l, _ = _unpack(u, j_max)
    chol = corr_l * jnp.exp(log_sd)[:, None]
    return chol @ chol.T


class PosteriorModel:
    """Log posterior bound to one dataset and prior.

    Parameters
    ----------
    ds : TrialDataset
    prior : PriorSpec
    include_post_ice : bool
        Whether retrieved post-ICE blocks of active patients enter the
        likelihood through the causal model.
    fixed_k0 : float, optional
        Hold ``k0`` at this value; the free vector then omits it.
    weights : array_like, optional
        Per-patient frequency weights (bootstrap).

    Notes
    -----
    The free vector equals the unconstrained vector when ``fixed_k0`` is
    None. All evaluation methods return NumPy values.
    """

    def __init__(self, ds, prior=None, include_post_ice=True, fixed_k0=None, weights=None,
                 design=None, stats=None):
        self.ds = ds
        self.prior = PriorSpec() if prior is None else prior
        self.include_post_ice = bool(include_post_ice)
        self.fixed_k0 = None if fixed_k0 is None else float(fixed_k0)
        self.layout = ParamLayout(ds.j_max)
        self.design = build_design(ds, include_post_ice) if design is None else design
        self.stats = group_stats(self.design, weights) if stats is None else stats
        self._hyper = jnp.asarray(self.prior.hyper_vector())
        self._stats_j = tuple(jnp.asarray(a) for a in self.stats.arrays())
        self._k0_val = np.float64(0.0 if self.fixed_k0 is None else self.fixed_k0)

    @property
    def k0_free(self):
        return self.fixed_k0 is None

    @property
    def dim(self):
        return self.layout.size - (0 if self.k0_free else 1)

    def with_stats(self, stats):
        """Same model on different sufficient statistics (resampling)."""
        return PosteriorModel(
            self.ds, self.prior, self.include_post_ice, self.fixed_k0,
            design=self.design, stats=stats,
        )

    def with_weights(self, weights):
        return self.with_stats(group_stats(self.design, weights))

    def leave_one_out(self, i):
        return self.with_stats(leave_one_out(self.stats, self.design, i))

    def to_free(self, u):
        u = np.asarray(u, dtype=float)
        if self.k0_free:
            return u.copy()
        return np.delete(u, self.layout.k0_index)

    def to_full(self, v):
        v = np.asarray(v, dtype=float)
        if self.k0_free:
            return v.copy()
        return np.insert(v, self.layout.k0_index, self.fixed_k0)

    def params(self, v):
        return from_unconstrained(self.to_full(v), self.layout.j_max)

    def _args(self, v, jacobian):
        return (np.asarray(v, dtype=float), self._k0_val, self._stats_j, self._hyper), dict(
            j_max=self.layout.j_max, jacobian=bool(jacobian), k0_free=self.k0_free
        )

    def logp(self, v, jacobian=True):
        args, kw = self._args(v, jacobian)
        val = float(_value_fn(*args, **kw))
        if not np.isfinite(val):
            self._raise_nonfinite(v)
        return val

    def logp_and_grad(self, v, jacobian=True):
        args, kw = self._args(v, jacobian)
        val, grad = _value_grad_fn(*args, **kw)
        return float(val), np.asarray(grad)

    def hessian(self, v, jacobian=True):
        args, kw = self._args(v, jacobian)
        h = np.asarray(_hessian_fn(*args, **kw))
        return 0.5 * (h + h.T)

    def loglik(self, v):
        u = jnp.asarray(self.to_full(v))
        return float(_loglik_fn(u, self._stats_j, self.layout.j_max))

    def _raise_nonfinite(self, v):
        """Locate the first patient whose term is not finite."""
        p = self.params(v)
        patient = None
        for i in patient_logliks_iter(self.design, p):
            patient = self.ds.ids[i]
            break
        raise NumericalError("log posterior is not finite", patient_id=patient)


def patient_logliks_iter(design, p):
    """Yield indices of patients with a non-finite likelihood term."""
    j_max = design.j_max
    delta = p.mu_active - p.mu_control
    with np.errstate(all="ignore"):
        for i in range(design.group.shape[0]):
            g = design.group[i]
            mask = design.mask[g].astype(bool)
            if not mask.any():
                continue
            src = design.src_active[g]
            mean = src * p.mu_active + (1 - src) * p.mu_control
            mean = mean + design.post[g] * p.k0 * delta[design.d_index[g]]
            r = design.z[i, :j_max] - p.alpha * design.z[i, j_max] - mean
            sub = p.sigma[np.ix_(mask, mask)]
            try:
                sol = np.linalg.solve(sub, r[mask])
                val = r[mask] @ sol + np.linalg.slogdet(sub)[1]
            except np.linalg.LinAlgError:
                val = np.nan
            if not np.isfinite(val):
                yield i


def log_posterior(u, ds, prior=None, include_post_ice=True, jacobian=True):
    """Log posterior density of the unconstrained vector ``u``.

    Convenience wrapper around :class:`PosteriorModel` (which should be
    reused when evaluating many points on the same data).
    """
    return PosteriorModel(ds, prior, include_post_ice).logp(u, jacobian)
