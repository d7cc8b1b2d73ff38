"""Input checking shared by the estimator classes and the CLI."""

from __future__ import annotations

import numbers
from pathlib import Path

import numpy as np

from .exceptions import TrialValidationError
from .inference.priors import PriorSpec
from .trial import ACTIVE, ARMS, TrialDataset, VisitSchedule, read_csv


def check_schedule(schedule, j_max=None):
    if schedule is None:
        if j_max is None:
            raise ValueError("a schedule is needed")
        return VisitSchedule(tuple(range(j_max + 1)))
    if isinstance(schedule, VisitSchedule):
        return schedule
    if isinstance(schedule, (str, Path)):
        return VisitSchedule.from_file(schedule)
    return VisitSchedule(tuple(schedule))


def _wide_columns(X):
    cols = [str(c) for c in (X.columns if hasattr(X, "columns") else X.keys())]
    ys = sorted((c for c in cols if c[:1] == "y" and c[1:].isdigit()), key=lambda c: int(c[1:]))
    missing = [c for c in ("id", "arm", "base", "d") if c not in cols]
    if missing or not ys:
        raise TrialValidationError(
            f"wide table needs columns id, arm, base, y1..yJ, d (missing {missing or ['y*']})"
        )
    return ys


def _d_values(raw, j_max):
    out = []
    for v in raw:
        if v is None or (isinstance(v, str) and v.strip().lower() == "none"):
            out.append(j_max)
        elif isinstance(v, numbers.Real) and np.isnan(v):
            out.append(j_max)
        else:
            out.append(int(v))
    return out


def check_trial(X, schedule=None):
    """Coerce ``X`` to a :class:`TrialDataset`.

    Parameters
    ----------
    X : TrialDataset, path-like, DataFrame or mapping of columns
        A wide table with columns ``id, arm, base, y1..yJ, d`` is accepted
        (``d`` may hold ``'none'`` or NaN for patients without an ICE).
    schedule : VisitSchedule, sequence of weeks or path, optional
        Only used for tables and CSV files.
    """
    if isinstance(X, TrialDataset):
        return X
    if isinstance(X, (str, Path)):
        return read_csv(X, schedule=schedule)
    if hasattr(X, "columns") or isinstance(X, dict):
        ys = _wide_columns(X)
        j_max = len(ys)
        arms = [str(a) for a in np.asarray(X["arm"])]
        bad = sorted(set(arms) - set(ARMS))
        if bad:
            raise TrialValidationError(f"unknown arm labels {bad}")
        y = np.column_stack([np.asarray(X[c], dtype=float) for c in ys])
        return TrialDataset.from_arrays(
            check_schedule(schedule, j_max), np.asarray(X["id"]),
            [a == ACTIVE for a in arms], np.asarray(X["base"], dtype=float), y,
            _d_values(np.asarray(X["d"], dtype=object), j_max),
        )
    raise TypeError(f"cannot interpret {type(X).__name__} as trial data")


def check_random_state(seed):
    """``numpy.random.Generator`` from None, an int, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot seed a numpy Generator")


def check_seed(seed):
    """Integer seed (a fresh one drawn from OS entropy for None)."""
    if seed is None:
        return int(np.random.SeedSequence().generate_state(1)[0])
    if isinstance(seed, numbers.Integral) and seed >= 0:
        return int(seed)
    raise ValueError("seed must be a non-negative integer")


def check_prior(prior=None, **overrides):
    """PriorSpec from None, a dict or a PriorSpec, with keyword overrides."""
    if prior is None:
        base = {}
    elif isinstance(prior, PriorSpec):
        base = prior.to_dict()
    elif isinstance(prior, dict):
        base = dict(prior)
    else:
        raise TypeError("prior must be a PriorSpec or a dict")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return PriorSpec.from_dict(base)
