"""Final-visit ANCOVA, confidence intervals and coverage bookkeeping."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

Z975 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate, standard error and 95% interval of one estimator.

    Only ``ci_low <= ci_high`` is guaranteed; quantile intervals need not
    contain the point estimate.
    """

    method: str
    point: float
    se: float
    ci_low: float
    ci_high: float
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("point", "se", "ci_low", "ci_high"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.ci_low > self.ci_high:
            raise ValueError("ci_low must not exceed ci_high")
        if self.se < 0:
            raise ValueError("se must be non-negative")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)

    def format(self):
        lines = [
            f"method    {self.method}",
            f"estimate  {self.point: .6f}",
            f"se        {self.se: .6f}",
            f"95% CI    [{self.ci_low: .6f}, {self.ci_high: .6f}]",
        ]
        for k in sorted(self.aux):
            v = self.aux[k]
            if isinstance(v, (dict, list)):
                continue
            lines.append(f"{k:<9} {v}")
        return "\n".join(lines)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


@dataclass(frozen=True)
class AncovaResult:
    estimate: float
    se: float
    df: int


def _design(baseline, treatment):
    return np.column_stack([np.ones_like(baseline), baseline, treatment])


def ancova_arrays(y_final, baseline, treatment, robust=False):
    """OLS of the final-visit outcome on intercept, baseline and treatment.

    Parameters
    ----------
    y_final : ndarray (n,) or (m, n)
        One or several outcome vectors sharing the same design.
    baseline, treatment : ndarray (n,)
    robust : bool
        HC0 sandwich SEs instead of the classical ones.

    Returns
    -------
    estimate, se : float or ndarray (m,)
    df : int
    """
    y = np.asarray(y_final, dtype=float)
    x = _design(np.asarray(baseline, float), np.asarray(treatment, float))
    n, k = x.shape
    if np.linalg.matrix_rank(x) < k:
        raise np.linalg.LinAlgError("ANCOVA design is rank deficient")
    if np.isnan(y).any():
        raise ValueError("final-visit outcomes must be complete")
    df = n - k
    q, r = np.linalg.qr(x)
    yt = y.T if y.ndim == 2 else y[:, None]
    coef = np.linalg.solve(r, q.T @ yt)
    resid = yt - x @ coef
    r_inv = np.linalg.inv(r)
    xtx_inv = r_inv @ r_inv.T
    if robust:
        meat = np.einsum("ni,nm,nj->mij", x, resid**2, x)
        var = np.einsum("i,mij,j->m", xtx_inv[2], meat, xtx_inv[2])
    else:
        s2 = np.sum(resid**2, axis=0) / df
        var = s2 * xtx_inv[2, 2]
    est = coef[2]
    se = np.sqrt(var)
    if y.ndim == 1:
        return float(est[0]), float(se[0]), df
    return est, se, df


def ancova(cds, robust=False):
    """ANCOVA treatment effect on a completed dataset.

    Parameters
    ----------
    cds : CompletedDataset or TrialDataset
        Final-visit outcomes must be complete.

    Returns
    -------
    AncovaResult
    """
    ds = getattr(cds, "data", cds)
    est, se, df = ancova_arrays(ds.y[:, -1], ds.baseline, ds.treatment, robust=robust)
    return AncovaResult(est, se, df)


def interval(point, se, df=None, level=0.95):
    """Symmetric interval ``point +- q * se`` with a t (finite df) or normal quantile."""
    if se < 0:
        raise ValueError("se must be non-negative")
    tail = 0.5 + level / 2.0
    if df is None or not math.isfinite(df):
        q = stats.norm.ppf(tail)
    else:
        q = stats.t.ppf(tail, df)
    return float(point - q * se), float(point + q * se)


def covered(report, truth):
    """Closed-interval coverage check."""
    return bool(report.ci_low <= truth <= report.ci_high)
