"""Longitudinal two-arm trial data: schedule, records, CSV round-trips.

A trial is stored in wide form, one row per patient::

    id,arm,base,y1,...,yJ,d

``arm`` is ``control`` or ``active``, empty outcome cells are missing, and
``d`` is the last visit index (1..J) at which the patient was still on
randomized treatment. ``none`` (or ``J``) marks a patient without an
intercurrent event. Visit weeks live in a companion schedule file next to the
CSV (``<stem>.schedule.json`` or ``<stem>.schedule.toml``).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import TrialParseError, TrialValidationError

CONTROL = "control"
ACTIVE = "active"
ARMS = (CONTROL, ACTIVE)


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


@dataclass(frozen=True)
class VisitSchedule:
    """Visit times in weeks, baseline first.

    Parameters
    ----------
    times : sequence of float
        Strictly increasing, ``times[0] == 0``, at least one follow-up visit.
    """

    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise TrialValidationError("schedule needs baseline plus at least one visit")
        if times[0] != 0.0:
            raise TrialValidationError("schedule must start at week 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise TrialValidationError("schedule times must be strictly increasing")
        object.__setattr__(self, "times", times)

    @property
    def n_visits(self):
        """Number of post-baseline visits (j_max)."""
        return len(self.times) - 1

    @property
    def followup(self):
        return np.asarray(self.times[1:])

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if path.suffix == ".toml":
            raw = _load_toml(path)
        else:
            raw = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(raw, dict):
            raw = raw.get("weeks", raw.get("times"))
        if raw is None:
            raise TrialValidationError(f"{path}: schedule file needs a 'weeks' list")
        return cls(tuple(raw))

    def to_file(self, path):
        Path(path).write_text(
            json.dumps({"weeks": [_num(t) for t in self.times]}) + "\n", encoding="utf-8"
        )


def _num(t):
    return int(t) if float(t).is_integer() else float(t)


@dataclass(frozen=True, eq=False)
class PatientRecord:
    """One patient's row. ``y`` holds post-baseline outcomes with NaN for missing."""

    id: str
    arm: str
    baseline: float
    y: np.ndarray
    d: int

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def j_max(self):
        return self.y.shape[0]

    @property
    def has_ice(self):
        return self.d < self.j_max

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.arm == other.arm
            and self.d == other.d
            and _same_float(self.baseline, other.baseline)
            and self.y.shape == other.y.shape
            and np.array_equal(self.y, other.y, equal_nan=True)
        )

    def __repr__(self):
        return (
            f"PatientRecord(id={self.id!r}, arm={self.arm!r}, baseline={self.baseline!r}, "
            f"y={self.y.tolist()!r}, d={self.d})"
        )


def _same_float(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


class TrialDataset:
    """Immutable, array-backed collection of patient records.

    Construction validates every record; the arrays exposed as attributes are
    read-only views.

    Parameters
    ----------
    schedule : VisitSchedule
    patients : iterable of PatientRecord
    """

    def __init__(self, schedule, patients):
        patients = tuple(patients)
        j_max = schedule.n_visits
        for p in patients:
            if p.y.shape != (j_max,):
                raise TrialValidationError(
                    f"expected {j_max} post-baseline outcomes, got {p.y.shape[0]}", p.id
                )
        if patients:
            y = np.stack([p.y for p in patients])
        else:
            y = np.empty((0, j_max))
        self._init(
            schedule,
            np.array([str(p.id) for p in patients], dtype=object),
            np.array([p.arm == ACTIVE for p in patients], dtype=bool),
            np.array([p.baseline for p in patients], dtype=float),
            y,
            np.array([p.d for p in patients], dtype=int),
            arm_labels=[p.arm for p in patients],
        )
        self._patients = patients

    @classmethod
    def from_arrays(cls, schedule, ids, active, baseline, y, d):
        """Build directly from column arrays (``active`` is boolean)."""
        obj = cls.__new__(cls)
        obj._init(
            schedule,
            np.array([str(i) for i in ids], dtype=object),
            np.asarray(active, dtype=bool).copy(),
            np.asarray(baseline, dtype=float).copy(),
            np.asarray(y, dtype=float).copy(),
            np.asarray(d, dtype=int).copy(),
        )
        obj._patients = None
        return obj

    def _init(self, schedule, ids, active, baseline, y, d, arm_labels=None):
        self.schedule = schedule
        j_max = schedule.n_visits
        if y.ndim != 2 or y.shape[1] != j_max:
            raise TrialValidationError(f"outcome matrix must have {j_max} columns")
        n = y.shape[0]
        if not (ids.shape == active.shape == baseline.shape == d.shape == (n,)):
            raise TrialValidationError("column arrays have inconsistent lengths")
        if arm_labels is not None:
            for pid, arm in zip(ids, arm_labels):
                if arm not in ARMS:
                    raise TrialValidationError(f"arm must be one of {ARMS}, got {arm!r}", pid)
        _validate(ids, active, baseline, y, d, j_max)
        for arr in (ids, active, baseline, y, d):
            arr.setflags(write=False)
        self.ids, self.active, self.baseline, self.y, self.d = ids, active, baseline, y, d
        self.observed = ~np.isnan(y)
        self.observed.setflags(write=False)

    # -- views -----------------------------------------------------------
    @property
    def j_max(self):
        return self.schedule.n_visits

    @property
    def n(self):
        return self.y.shape[0]

    def __len__(self):
        return self.n

    @property
    def patients(self):
        if self._patients is None:
            self._patients = tuple(
                PatientRecord(
                    self.ids[i],
                    ACTIVE if self.active[i] else CONTROL,
                    float(self.baseline[i]),
                    self.y[i],
                    int(self.d[i]),
                )
                for i in range(self.n)
            )
        return self._patients

    @property
    def treatment(self):
        """Treatment indicator as float (1 active, 0 control)."""
        return self.active.astype(float)

    @property
    def has_ice(self):
        return self.d < self.j_max

    @property
    def post_ice_observed(self):
        """Patients with an ICE whose post-ICE block is (fully) observed."""
        post = np.arange(1, self.j_max + 1)[None, :] > self.d[:, None]
        any_post_obs = (self.observed & post).any(axis=1)
        return self.has_ice & any_post_obs

    @property
    def n_missing(self):
        return int((~self.observed).sum())

    def subset(self, index):
        """Dataset restricted to (possibly repeated) row positions ``index``."""
        index = np.asarray(index)
        ids = self.ids[index]
        if index.dtype != bool and len(np.unique(index)) != len(index):
            # keep ids unique so written CSVs remain unambiguous
            counts = {}
            fresh = []
            for pid in ids:
                k = counts.get(pid, 0)
                counts[pid] = k + 1
                fresh.append(pid if k == 0 else f"{pid}#{k}")
            ids = fresh
        return TrialDataset.from_arrays(
            self.schedule, ids, self.active[index], self.baseline[index],
            self.y[index], self.d[index],
        )

    def with_outcomes(self, y):
        """Same patients with a replacement outcome matrix (validated)."""
        return TrialDataset.from_arrays(
            self.schedule, self.ids, self.active, self.baseline, y, self.d
        )

    def __eq__(self, other):
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (
            self.schedule == other.schedule
            and self.n == other.n
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.active, other.active)
            and np.array_equal(self.baseline, other.baseline)
            and np.array_equal(self.y, other.y, equal_nan=True)
            and np.array_equal(self.d, other.d)
        )

    def __repr__(self):
        n_act = int(self.active.sum())
        return (
            f"TrialDataset(n_control={self.n - n_act}, n_active={n_act}, "
            f"j_max={self.j_max}, missing_cells={self.n_missing})"
        )


def _validate(ids, active, baseline, y, d, j_max):
    if len(set(ids.tolist())) != len(ids):
        seen = set()
        for pid in ids:
            if pid in seen:
                raise TrialValidationError("duplicate patient id", pid)
            seen.add(pid)
    bad = ~np.isfinite(baseline)
    if bad.any():
        raise TrialValidationError("baseline must be observed and finite", ids[bad.argmax()])
    bad = np.isinf(y).any(axis=1)
    if bad.any():
        raise TrialValidationError("outcomes must be finite or missing", ids[bad.argmax()])
    bad = (d < 1) | (d > j_max)
    if bad.any():
        raise TrialValidationError(f"d must lie in 1..{j_max}", ids[bad.argmax()])
    observed = ~np.isnan(y)
    visit = np.arange(1, j_max + 1)[None, :]
    pre = visit <= d[:, None]
    post = ~pre
    # active arm: pre-ICE complete, post-ICE all-or-nothing
    pre_gap = active & (pre & ~observed).any(axis=1)
    if pre_gap.any():
        raise TrialValidationError(
            "active-arm pre-ICE visits must all be observed", ids[pre_gap.argmax()]
        )
    n_post = post.sum(axis=1)
    n_post_obs = (post & observed).sum(axis=1)
    partial = active & (n_post_obs > 0) & (n_post_obs < n_post)
    if partial.any():
        raise TrialValidationError(
            "post-ICE block must be entirely observed or entirely missing",
            ids[partial.argmax()],
        )
    if len(ids) and (active.all() or not active.any()):
        raise TrialValidationError("dataset needs at least one patient in each arm")
    if len(ids) == 0:
        raise TrialValidationError("dataset has no patients")


# -- CSV ------------------------------------------------------------------

def _companion_schedule(path):
    path = Path(path)
    stem = path.with_suffix("")
    for suffix in (".schedule.json", ".schedule.toml"):
        cand = stem.with_name(stem.name + suffix)
        if cand.exists():
            return cand
    return None


def read_csv(path, schedule=None):
    """Read a wide-format trial CSV.

    Parameters
    ----------
    path : path-like
    schedule : VisitSchedule or path-like, optional
        Visit weeks. Defaults to the companion schedule file; when none
        exists, visits are numbered 0..J with a warning.

    Returns
    -------
    TrialDataset

    Raises
    ------
    TrialParseError
        Malformed header or row (the message names the line).
    TrialValidationError
        A record violates the dataset invariants (names the patient).
    """
    path = Path(path)
    ids, arms, base, ys, ds = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (ln for ln in fh)
        reader = csv.reader(_skip_comments(lines))
        header = None
        for row in reader:
            line = reader.line_num
            if header is None:
                if not row:
                    continue
                header = [h.strip() for h in row]
                j_max = _check_header(header, line)
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise TrialParseError(
                    f"expected {len(header)} fields, found {len(row)}", line
                )
            pid, arm = row[0].strip(), row[1].strip()
            if arm not in ARMS:
                raise TrialParseError(f"arm must be 'control' or 'active', got {arm!r}", line)
            try:
                b = float(row[2])
                y = [float(c) if c.strip() else math.nan for c in row[3:3 + j_max]]
            except ValueError as exc:
                raise TrialParseError(f"non-numeric value ({exc})", line) from None
            dtok = row[3 + j_max].strip()
            if dtok.lower() == "none":
                d = j_max
            else:
                try:
                    d = int(dtok)
                except ValueError:
                    raise TrialParseError(f"d must be an integer or 'none', got {dtok!r}", line) from None
            ids.append(pid)
            arms.append(arm)
            base.append(b)
            ys.append(y)
            ds.append(d)
    if header is None:
        raise TrialParseError("empty file", 1)
    if schedule is None:
        comp = _companion_schedule(path)
        if comp is not None:
            schedule = VisitSchedule.from_file(comp)
        else:
            warnings.warn(
                f"no schedule file next to {path.name}; using visit numbers as weeks",
                stacklevel=2,
            )
            schedule = VisitSchedule(tuple(range(j_max + 1)))
    elif not isinstance(schedule, VisitSchedule):
        schedule = VisitSchedule.from_file(schedule)
    if schedule.n_visits != j_max:
        raise TrialValidationError(
            f"schedule has {schedule.n_visits} follow-up visits but CSV has {j_max}"
        )
    y = np.array(ys, dtype=float).reshape(len(ys), j_max)
    ds_ = TrialDataset.from_arrays(schedule, ids, [a == ACTIVE for a in arms], base, y, ds)
    return ds_


def _skip_comments(lines):
    for ln in lines:
        if ln.startswith("#"):
            yield "\n"  # keep csv line numbering aligned with the file
        else:
            yield ln


def _check_header(header, line):
    if len(header) < 5 or header[:3] != ["id", "arm", "base"] or header[-1] != "d":
        raise TrialParseError("header must read id,arm,base,y1,...,yJ,d", line)
    j_max = len(header) - 4
    expected = [f"y{j}" for j in range(1, j_max + 1)]
    if header[3:-1] != expected:
        raise TrialParseError(f"outcome columns must be {','.join(expected)}", line)
    return j_max


def _fmt(x):
    if math.isnan(x):
        return ""
    return format(x, ".17g")


def write_csv(ds, path, comment=None, schedule_file=True):
    """Write ``ds`` in wide CSV form (17 significant digits).

    ``comment`` is written as a leading ``# ...`` line. When
    ``schedule_file`` is true the companion ``<stem>.schedule.json`` is
    written too.
    """
    if not isinstance(ds, TrialDataset):
        raise TypeError("write_csv expects a TrialDataset")
    if ds.n == 0:
        raise TrialValidationError("dataset has no patients")
    path = Path(path)
    j_max = ds.j_max
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            for ln in str(comment).splitlines():
                fh.write(f"# {ln}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "arm", "base"] + [f"y{j}" for j in range(1, j_max + 1)] + ["d"])
        for i in range(ds.n):
            d = int(ds.d[i])
            w.writerow(
                [ds.ids[i], ACTIVE if ds.active[i] else CONTROL, _fmt(ds.baseline[i])]
                + [_fmt(v) for v in ds.y[i]]
                + ["none" if d == j_max else str(d)]
            )
    if schedule_file:
        stem = path.with_suffix("")
        ds.schedule.to_file(stem.with_name(stem.name + ".schedule.json"))


# -- summaries ------------------------------------------------------------

@dataclass(frozen=True)
class ArmVisitCounts:
    """Per-visit counts for one arm (arrays of length j_max)."""

    arm: str
    n: int
    pre: np.ndarray
    obs: np.ndarray
    miss: np.ndarray
    pre_missing: np.ndarray


def summarize(ds):
    """Count pre-ICE, observed post-ICE and missing post-ICE outcomes per visit.

    Pre-ICE counts include any intermittently missing on-treatment visits
    (reported separately in ``pre_missing``) so that each visit's counts add
    up to the arm size.

    Returns
    -------
    dict
        ``{"control": ArmVisitCounts, "active": ArmVisitCounts}``
    """
    visit = np.arange(1, ds.j_max + 1)[None, :]
    pre = visit <= ds.d[:, None]
    out = {}
    for arm, sel in ((CONTROL, ~ds.active), (ACTIVE, ds.active)):
        obs = ds.observed[sel]
        p = pre[sel]
        out[arm] = ArmVisitCounts(
            arm=arm,
            n=int(sel.sum()),
            pre=p.sum(axis=0),
            obs=(~p & obs).sum(axis=0),
            miss=(~p & ~obs).sum(axis=0),
            pre_missing=(p & ~obs).sum(axis=0),
        )
    return out


def format_summary(summary):
    """Plain-text table in the layout of a pre/obs/miss frequency table."""
    arms = (CONTROL, ACTIVE)
    j_max = len(summary[CONTROL].pre)
    head = f"{'visit':>5} | " + " | ".join(f"{a:^17}" for a in arms)
    sub = f"{'':>5} | " + " | ".join(f"{'Pre':>5} {'Obs':>5} {'Miss':>5}" for _ in arms)
    rows = [head, sub, "-" * len(sub)]
    for j in range(j_max):
        cells = []
        for a in arms:
            s = summary[a]
            cells.append(f"{s.pre[j]:>5d} {s.obs[j]:>5d} {s.miss[j]:>5d}")
        rows.append(f"{j + 1:>5} | " + " | ".join(cells))
    return "\n".join(rows)
