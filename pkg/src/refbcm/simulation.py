"""Trial simulator: on-treatment MVN outcomes, logistic discontinuation
hazard, causal-model off-treatment outcomes for the active arm and MCAR loss
of whole post-ICE blocks.

Outcomes including baseline are drawn jointly from ``MVN(mu_arm, C)`` with a
spatial-power ``C``. The hazard at each hazard week uses the baseline and the
(on-treatment) outcome at the preceding visit; an event at week ``w`` makes
``w`` the first post-ICE visit, so ``d`` is the visit before ``w``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .causal import CausalParams
from .gaussian import spatial_power_cov
from .trial import TrialDataset, VisitSchedule

_WEEKS = (0.0, 4.0, 8.0, 14.0, 20.0, 26.0)


@dataclass(frozen=True)
class SimScenario:
    """Data-generating settings for one simulation scenario.

    Vectors indexed by visit include baseline (week 0) first. Hazard
    coefficient vectors have one entry per hazard week.
    """

    name: str = "hd-hm-k0-0"
    weeks: tuple = _WEEKS
    mu_active: tuple = (7.92, 7.55, 7.20, 7.10, 7.05, 7.05)
    mu_control: tuple = (7.92, 7.82, 7.80, 7.80, 7.78, 7.78)
    variances: tuple = (0.48, 0.80, 1.10, 1.40, 1.23, 1.48)
    rho: float = 0.8
    n_per_arm: int = 500
    hazard_weeks: tuple = (8.0, 14.0, 20.0, 26.0)
    beta_base_active: tuple = (0.30, 0.10, 0.05, 0.00)
    beta_prev_active: tuple = (1.14, 1.47, 1.48, 1.40)
    beta_base_control: tuple = (0.30, 0.10, 0.05, 0.00)
    beta_prev_control: tuple = (1.14, 1.33, 1.51, 1.46)
    beta0: float = -13.0
    true_k0: float = 0.0
    miss_prob: float = 0.9
    seed: int = 20240601
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("weeks", "mu_active", "mu_control", "variances", "hazard_weeks",
                     "beta_base_active", "beta_prev_active", "beta_base_control",
                     "beta_prev_control"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        n_t = len(self.weeks)
        for name in ("mu_active", "mu_control", "variances"):
            if len(getattr(self, name)) != n_t:
                raise ValueError(f"{name} needs {n_t} entries (one per week)")
        n_h = len(self.hazard_weeks)
        for name in ("beta_base_active", "beta_prev_active", "beta_base_control",
                     "beta_prev_control"):
            if len(getattr(self, name)) != n_h:
                raise ValueError(f"{name} needs {n_h} entries (one per hazard week)")
        missing = [w for w in self.hazard_weeks if w not in self.weeks[2:]]
        if missing:
            raise ValueError(f"hazard weeks {missing} are not follow-up visits after the first")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError(f"miss_prob must lie in [0, 1], got {self.miss_prob}")
        if int(self.n_per_arm) < 1:
            raise ValueError("n_per_arm must be positive")
        if any(v <= 0 for v in self.variances):
            raise ValueError("variances must be positive")
        if self.mu_active[0] != self.mu_control[0]:
            raise ValueError("baseline means must agree between arms")
        object.__setattr__(self, "n_per_arm", int(self.n_per_arm))
        object.__setattr__(self, "seed", int(self.seed))
        VisitSchedule(self.weeks)

    @property
    def schedule(self):
        return VisitSchedule(self.weeks)

    @property
    def j_max(self):
        return len(self.weeks) - 1

    def covariance(self):
        """Joint covariance of (baseline, follow-up visits)."""
        return spatial_power_cov(self.variances, self.weeks, self.rho)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        out = asdict(self)
        out.pop("extra")
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def true_causal_params(sc: SimScenario, k0=None):
    """Causal-model parameters implied by the generator.

    Conditioning the joint MVN on baseline gives visit slopes
    ``C[j, 0] / C[0, 0]`` and residual covariance equal to the Schur complement.
    """
    c = sc.covariance()
    alpha = c[1:, 0] / c[0, 0]
    sigma = c[1:, 1:] - np.outer(c[1:, 0], c[0, 1:]) / c[0, 0]
    base = sc.mu_active[0]
    return CausalParams(
        mu_active=np.asarray(sc.mu_active[1:]) - alpha * base,
        mu_control=np.asarray(sc.mu_control[1:]) - alpha * base,
        alpha=alpha,
        sigma=sigma,
        k0=sc.true_k0 if k0 is None else k0,
    )


def _arm_stream(sc, rep_seed, arm):
    return np.random.default_rng(np.random.SeedSequence([sc.seed, int(rep_seed), arm]))


def _simulate_arm(sc, n, rng, active, chol):
    """Full outcome matrix (baseline first), ICE visit and MCAR uniforms.

    Random numbers are always drawn in the same order and amount, so that
    scenarios differing only in ``beta0``, ``true_k0`` or ``miss_prob``
    share their on-treatment draws.
    """
    weeks = np.asarray(sc.weeks)
    n_t = weeks.size
    j_max = n_t - 1
    mu_a = np.asarray(sc.mu_active)
    mu_c = np.asarray(sc.mu_control)
    mu = mu_a if active else mu_c
    y = mu + rng.standard_normal((n, n_t)) @ chol.T
    u_haz = rng.random((n, len(sc.hazard_weeks)))
    z_post = rng.standard_normal((n, j_max))
    u_miss = rng.random(n)

    b_base = sc.beta_base_active if active else sc.beta_base_control
    b_prev = sc.beta_prev_active if active else sc.beta_prev_control
    d = np.full(n, j_max)
    alive = np.ones(n, dtype=bool)
    for h, week in enumerate(sc.hazard_weeks):
        vis = int(np.flatnonzero(weeks == week)[0])
        prob = expit(sc.beta0 + b_base[h] * y[:, 0] + b_prev[h] * y[:, vis - 1])
        event = alive & (u_haz[:, h] < prob)
        d[event] = vis - 1
        alive &= ~event

    if active:
        c = chol @ chol.T
        for dj in range(1, j_max):
            rows = np.flatnonzero(d == dj)
            if rows.size == 0:
                continue
            o = np.arange(dj + 1)
            u = np.arange(dj + 1, n_t)
            c_oo = c[np.ix_(o, o)]
            c_uo = c[np.ix_(u, o)]
            bt = np.linalg.solve(c_oo, c_uo.T)
            schur = c[np.ix_(u, u)] - c_uo @ bt
            shift = sc.true_k0 * (mu_a[dj] - mu_c[dj])
            cmean = mu_c[u] + shift + (y[np.ix_(rows, o)] - mu_a[o]) @ bt
            y[np.ix_(rows, u)] = cmean + z_post[rows, : u.size] @ np.linalg.cholesky(schur).T
    return y, d, u_miss


def simulate_trial(sc: SimScenario, rep_seed=0):
    """One simulated trial (control patients first, then active).

    Parameters
    ----------
    sc : SimScenario
    rep_seed : int
        Replicate index; each (scenario seed, replicate, arm) triple owns an
        independent random stream.
    """
    chol = np.linalg.cholesky(sc.covariance())
    n = sc.n_per_arm
    j_max = sc.j_max
    ys, ds, ids = [], [], []
    for arm, label in ((0, "c"), (1, "a")):
        rng = _arm_stream(sc, rep_seed, arm)
        y, d, u_miss = _simulate_arm(sc, n, rng, bool(arm), chol)
        lost = (d < j_max) & (u_miss < sc.miss_prob)
        post = np.arange(1, j_max + 1)[None, :] > d[:, None]
        y[:, 1:][lost[:, None] & post] = np.nan
        ys.append(y)
        ds.append(d)
        ids += [f"{label}{i + 1:04d}" for i in range(n)]
    y = np.concatenate(ys)
    return TrialDataset.from_arrays(
        sc.schedule, ids, np.repeat([False, True], n), y[:, 0], y[:, 1:], np.concatenate(ds)
    )


def true_policy_effect(sc: SimScenario, n_mc=2_000_000, seed=0, chunk=250_000):
    """Monte Carlo treatment-policy effect at the final visit.

    Difference of final-visit means over ``n_mc`` simulated patients per arm
    with no missingness.
    """
    chol = np.linalg.cholesky(sc.covariance())
    totals = [0.0, 0.0]
    for arm in (0, 1):
        rng = np.random.default_rng(np.random.SeedSequence([sc.seed, int(seed), 7919, arm]))
        left = int(n_mc)
        while left > 0:
            m = min(chunk, left)
            y, _, _ = _simulate_arm(sc, m, rng, bool(arm), chol)
            totals[arm] += y[:, -1].sum()
            left -= m
    return (totals[1] - totals[0]) / int(n_mc)


def discontinuation_rates(ds):
    """Realised ICE proportion per arm ``(control, active)``."""
    ice = ds.d < ds.j_max
    return float(ice[~ds.active].mean()), float(ice[ds.active].mean())
