"""Single-parameter reference-based causal model.

Post-baseline outcomes follow a shared-covariance MMRM with visit-specific
baseline slopes. A patient on active treatment who discontinues after visit
``j`` has post-ICE means equal to the control profile shifted by
``k0 * (active_j - control_j)`` at every later visit; the covariance is the
same for every discontinuation time and both arms.

Visits are 1-based in the public API (``d`` in ``1..j_max``); arrays are
indexed from 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gaussian import ConditionalGaussian, check_cov, mvn_condition, safe_cholesky

_PI_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CausalParams:
    """All parameters of the causal model.

    Attributes
    ----------
    mu_active, mu_control : ndarray (j_max,)
        On-treatment and control intercepts per visit.
    alpha : ndarray (j_max,)
        Per-visit coefficient of the baseline outcome (shared by both arms).
    sigma : ndarray (j_max, j_max)
        Residual covariance of post-baseline outcomes.
    k0 : float
        Maintained-effect fraction.
    pi : ndarray (j_max,) or None
        Active-arm discontinuation proportions by last on-treatment visit;
        ``pi[-1]`` covers completers. ``None`` where not estimated (MAP fits).
    """

    mu_active: np.ndarray
    mu_control: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    k0: float
    pi: np.ndarray | None = None
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mu_a = np.array(self.mu_active, dtype=float)
        j_max = mu_a.shape[0]
        mu_c = np.array(self.mu_control, dtype=float)
        alpha = np.array(self.alpha, dtype=float)
        if mu_a.ndim != 1 or mu_c.shape != mu_a.shape or alpha.shape != mu_a.shape:
            raise ValueError("mu_active, mu_control and alpha must be vectors of equal length")
        sigma = check_cov(np.array(self.sigma, dtype=float), "sigma")
        if sigma.shape != (j_max, j_max):
            raise ValueError("sigma must be j_max x j_max")
        chol = safe_cholesky(sigma)
        pi = self.pi
        if pi is not None:
            pi = np.array(pi, dtype=float)
            if pi.shape != (j_max,):
                raise ValueError("pi must have length j_max")
            if np.any(pi < 0) or abs(pi.sum() - 1.0) > _PI_TOL:
                raise ValueError("pi must be a probability vector")
            pi.setflags(write=False)
        for arr in (mu_a, mu_c, alpha, sigma, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "mu_active", mu_a)
        object.__setattr__(self, "mu_control", mu_c)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "k0", float(self.k0))
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "_chol", chol)

    @property
    def j_max(self):
        return self.mu_active.shape[0]

    @property
    def delta(self):
        """On-treatment effect per visit, ``mu_active - mu_control``."""
        return self.mu_active - self.mu_control

    def replace(self, **changes):
        kw = dict(
            mu_active=self.mu_active, mu_control=self.mu_control, alpha=self.alpha,
            sigma=self.sigma, k0=self.k0, pi=self.pi,
        )
        kw.update(changes)
        return CausalParams(**kw)

    def to_dict(self):
        return {
            "mu_active": self.mu_active.tolist(),
            "mu_control": self.mu_control.tolist(),
            "alpha": self.alpha.tolist(),
            "sigma": self.sigma.tolist(),
            "k0": self.k0,
            "pi": None if self.pi is None else self.pi.tolist(),
        }

    @classmethod
    def from_dict(cls, raw):
        return cls(
            mu_active=raw["mu_active"], mu_control=raw["mu_control"], alpha=raw["alpha"],
            sigma=raw["sigma"], k0=raw["k0"], pi=raw.get("pi"),
        )

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text_or_path):
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            with open(text_or_path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, CausalParams):
            return NotImplemented
        same_pi = (self.pi is None and other.pi is None) or (
            self.pi is not None and other.pi is not None and np.array_equal(self.pi, other.pi)
        )
        return (
            np.array_equal(self.mu_active, other.mu_active)
            and np.array_equal(self.mu_control, other.mu_control)
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.sigma, other.sigma)
            and self.k0 == other.k0
            and same_pi
        )


@dataclass(frozen=True)
class PatientMeans:
    """Hypothetical mean profiles of one patient under each arm."""

    active_profile: np.ndarray
    control_profile: np.ndarray


def patient_means(p, baseline):
    """Mean profiles ``mu + alpha * baseline`` for both arms."""
    return PatientMeans(
        p.mu_active + p.alpha * baseline,
        p.mu_control + p.alpha * baseline,
    )


def _check_visit(p, d):
    if not 1 <= d < p.j_max:
        raise ValueError(f"discontinuation visit must lie in 1..{p.j_max - 1}, got {d}")


def implied_mean(p, baseline, d):
    """Joint mean of all post-baseline outcomes for an active patient with ICE after ``d``.

    Visits ``<= d`` follow the active profile; later visits follow the
    control profile shifted by ``k0 * delta_d``. ``d == j_max`` gives the
    active profile.
    """
    pm = patient_means(p, baseline)
    if d >= p.j_max:
        return pm.active_profile.copy()
    shift = p.k0 * (pm.active_profile[d - 1] - pm.control_profile[d - 1])
    return np.concatenate([pm.active_profile[:d], pm.control_profile[d:] + shift])


def post_ice_conditional(p, baseline, y_pre, d):
    """Distribution of post-ICE outcomes given the pre-ICE block.

    Parameters
    ----------
    p : CausalParams
    baseline : float
    y_pre : array_like (d,)
        Fully observed outcomes at visits ``1..d``.
    d : int
        Last on-treatment visit, ``1 <= d < j_max``.
    """
    _check_visit(p, d)
    y_pre = np.asarray(y_pre, dtype=float)
    if y_pre.shape != (d,) or not np.all(np.isfinite(y_pre)):
        raise ValueError("y_pre must hold d observed outcomes")
    return mvn_condition(implied_mean(p, baseline, d), p.sigma, np.arange(d), y_pre)


def regression_coefficients(p, d):
    """``Sigma_{>d,<=d} Sigma_{<=d,<=d}^{-1}`` (rows: post visits)."""
    _check_visit(p, d)
    s = p.sigma
    return np.linalg.solve(s[:d, :d], s[:d, d:]).T


def marginal_post_ice_mean(p, baseline, d):
    """Expected post-ICE outcomes when pre-ICE outcomes follow the active profile."""
    _check_visit(p, d)
    return implied_mean(p, baseline, d)[d:]


def policy_effect(p, mean_baseline=0.0):
    """Treatment-policy effect at the final visit implied by ``p``.

    ``pi[-1] * delta[-1] + sum_{j < j_max} pi[j] * k0 * delta[j]``; the
    baseline slopes cancel between arms so ``mean_baseline`` has no effect.
    """
    if p.pi is None:
        raise ValueError("policy_effect needs discontinuation proportions pi")
    return float(policy_effect_draws(p.mu_active, p.mu_control, p.k0, p.pi))


def policy_effect_draws(mu_active, mu_control, k0, pi):
    """Vectorised policy effect over leading draw dimensions."""
    delta = np.asarray(mu_active) - np.asarray(mu_control)
    pi = np.asarray(pi)
    k0 = np.asarray(k0)
    return pi[..., -1] * delta[..., -1] + k0 * np.sum(pi[..., :-1] * delta[..., :-1], axis=-1)
