"""Prior hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of the causal-model priors.

    Attributes
    ----------
    k0_mean, k0_sd : float
        Normal prior on the maintained effect.
    mu_sd : float
        Normal(0, mu_sd) prior on every mean intercept (both arms).
    alpha_sd : float
        Normal(0, alpha_sd) prior on each baseline slope.
    sd_scale : float
        Half-normal scale for each marginal residual SD.
    corr_eta : float
        LKJ shape for the residual correlation matrix (1 is uniform).
    dirichlet_alpha : float or tuple of float
        Concentration of the Dirichlet prior on the discontinuation
        proportions; a scalar is broadcast over visits.
    """

    k0_mean: float = 0.0
    k0_sd: float = 100.0
    mu_sd: float = 10.0
    alpha_sd: float = 100.0
    sd_scale: float = 5.0
    corr_eta: float = 1.0
    dirichlet_alpha: float | tuple = field(default=1.0)

    def __post_init__(self):
        for name in ("k0_sd", "mu_sd", "alpha_sd", "sd_scale"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not np.isfinite(self.k0_mean):
            raise ValueError("k0_mean must be finite")
        if not self.corr_eta >= 1:
            raise ValueError("corr_eta must be >= 1")
        da = self.dirichlet_alpha
        if not np.isscalar(da):
            da = tuple(float(a) for a in da)
            object.__setattr__(self, "dirichlet_alpha", da)
        if np.any(np.asarray(da, dtype=float) <= 0):
            raise ValueError("dirichlet_alpha must be positive")

    def dirichlet_vector(self, j_max):
        da = np.asarray(self.dirichlet_alpha, dtype=float)
        if da.ndim == 0:
            return np.full(j_max, float(da))
        if da.shape != (j_max,):
            raise ValueError(f"dirichlet_alpha needs {j_max} entries")
        return da

    def hyper_vector(self):
        """Packed hyperparameters consumed by the compiled log density."""
        return np.array(
            [self.mu_sd, self.alpha_sd, self.k0_mean, self.k0_sd, self.sd_scale, self.corr_eta]
        )

    def to_dict(self):
        out = asdict(self)
        if isinstance(out["dirichlet_alpha"], tuple):
            out["dirichlet_alpha"] = list(out["dirichlet_alpha"])
        return out

    @classmethod
    def from_dict(cls, raw):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise KeyError(f"unknown prior fields: {sorted(unknown)}")
        return cls(**raw)
