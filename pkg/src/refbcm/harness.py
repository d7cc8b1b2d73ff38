"""Estimator dispatch, replication runner and benchmark tables.

Every replication simulates one trial per scenario, runs every requested
method on it and appends one row per (scenario, method) to a log CSV before
anything is aggregated. An interrupted run resumes from the log: replications
with all their rows present are skipped.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .analysis import EstimateReport, ancova_arrays, covered, interval
from .config import MethodSettings
from .exceptions import ConvergenceWarning, NonEstimableError, RefBCMError
from .imputation import bcm_cmi, bcm_mi_bootstrap, rbi_estimate, rd_estimate
from .inference.posterior import fit_bcm
from .inference.priors import PriorSpec
from .simulation import SimScenario, simulate_trial, true_policy_effect

METHODS = ("bcm", "bcm-cmi-jk", "bcm-cmi-bs", "bcm-mi-bs", "rd", "rbi-j2r", "rbi-cir",
           "ancova-complete")
_PRIOR_METHODS = ("bcm", "bcm-cmi-jk", "bcm-cmi-bs", "bcm-mi-bs")

LOG_FIELDS = ("rep", "scenario", "method", "prior_mean", "prior_sd", "miss_pct", "truth",
              "point", "se", "ci_low", "ci_high", "covered", "status", "df", "seconds")
TABLE_FIELDS = ("scenario", "method", "prior", "miss_pct", "truth", "mean", "emp_se",
                "est_se", "coverage", "mcse_mean", "n_reps", "failures")


# -- single estimator calls -----------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    """One estimator with its k0 prior (ignored by prior-free methods)."""

    method: str
    prior_mean: float = 0.0
    prior_sd: float = 100.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.prior_sd > 0:
            raise ValueError("prior_sd must be positive")
        if self.method not in _PRIOR_METHODS:
            object.__setattr__(self, "prior_mean", math.nan)
            object.__setattr__(self, "prior_sd", math.nan)

    @classmethod
    def parse(cls, text, prior_mean=0.0, prior_sd=100.0):
        """``'bcm'``, ``'bcm:0.5'`` (k0 prior SD) or ``'bcm:0:0.5'`` (mean, SD)."""
        parts = text.strip().split(":")
        try:
            if len(parts) == 2:
                prior_sd = float(parts[1])
            elif len(parts) == 3:
                prior_mean, prior_sd = float(parts[1]), float(parts[2])
            elif len(parts) != 1:
                raise ValueError
        except ValueError:
            raise ValueError(f"cannot parse method {text!r}") from None
        return cls(parts[0].strip().lower(), prior_mean, prior_sd)

    @property
    def uses_prior(self):
        return self.method in _PRIOR_METHODS

    @property
    def prior_label(self):
        if not self.uses_prior:
            return "-"
        return f"N({_g(self.prior_mean)},{_g(self.prior_sd)}^2)"

    @property
    def label(self):
        if not self.uses_prior:
            return self.method
        if self.prior_mean == 0:
            return f"{self.method}:{_g(self.prior_sd)}"
        return f"{self.method}:{_g(self.prior_mean)}:{_g(self.prior_sd)}"


def _g(x):
    return format(float(x), "g")


def _complete_case_ancova(ds):
    rows = ~np.isnan(ds.y[:, -1])
    est, se, df = ancova_arrays(ds.y[rows, -1], ds.baseline[rows], ds.treatment[rows])
    lo, hi = interval(est, se, df)
    return EstimateReport("ancova-complete", est, se, lo, hi,
                          dict(df=df, n_used=int(rows.sum())))


def run_method(ds, spec, settings=None, seed=0, prior=None):
    """Run one estimator on ``ds``.

    Parameters
    ----------
    ds : TrialDataset
    spec : MethodSpec or str
    settings : MethodSettings, optional
    seed : int
        All randomness of the call derives from this seed.
    prior : PriorSpec, optional
        Base prior; the k0 mean and SD of ``spec`` override it.

    Returns
    -------
    EstimateReport
    """
    spec = MethodSpec.parse(spec) if isinstance(spec, str) else spec
    settings = settings or MethodSettings()
    prior = prior or PriorSpec()
    if spec.uses_prior:
        prior = replace(prior, k0_mean=spec.prior_mean, k0_sd=spec.prior_sd)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    s = settings
    m = spec.method
    if m == "bcm":
        return fit_bcm(ds, prior, s.chains, s.warmup, s.keep, seed=int(seed))
    if m == "bcm-cmi-jk":
        return bcm_cmi(ds, prior, "jackknife")
    if m == "bcm-cmi-bs":
        return bcm_cmi(ds, prior, "bootstrap", s.bootstrap, rng)
    if m == "bcm-mi-bs":
        return bcm_mi_bootstrap(ds, prior, s.bootstrap, s.imputations, rng)
    if m == "rd":
        return rd_estimate(ds, s.rd_imputations, rng)
    if m in ("rbi-j2r", "rbi-cir"):
        return rbi_estimate(ds, m[4:], s.rbi_imputations, prior, s.rbi_warmup, s.rbi_thin, rng)
    return _complete_case_ancova(ds)


# -- replications ---------------------------------------------------------------------


_TRUTH_CACHE = {}


def _truth_key(sc):
    d = sc.to_dict()
    for k in ("name", "miss_prob", "n_per_arm"):
        d.pop(k)
    return json.dumps(d, sort_keys=True)


def scenario_truth(sc, n_mc=2_000_000, cache_file=None):
    """True policy effect, cached in memory and optionally in a JSON file."""
    key = _truth_key(sc) + f"|{int(n_mc)}"
    if key in _TRUTH_CACHE:
        return _TRUTH_CACHE[key]
    disk = {}
    if cache_file is not None and Path(cache_file).exists():
        disk = json.loads(Path(cache_file).read_text())
    if key in disk:
        value = float(disk[key])
    else:
        value = float(true_policy_effect(sc, n_mc))
        if cache_file is not None:
            disk[key] = value
            Path(cache_file).write_text(json.dumps(disk, indent=1, sort_keys=True))
    _TRUTH_CACHE[key] = value
    return value


def _method_seed(master_seed, rep, scenario, label):
    tag = zlib.crc32(f"{scenario}|{label}".encode())
    return int(np.random.SeedSequence([int(master_seed), int(rep), tag]).generate_state(1)[0])


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def run_replication(rep, scenarios, methods, settings, truths, master_seed=0, prior=None):
    """Log rows (dicts of strings) for one replication.

    ``methods`` is a list of ``(scenario index, MethodSpec)`` pairs. A failing
    method yields a row with ``status`` set to the error and no estimate.
    """
    rows = []
    data = {}
    for i, spec in methods:
        sc = scenarios[i]
        if i not in data:
            data[i] = simulate_trial(sc, rep)
        t0 = time.perf_counter()
        row = dict(rep=str(rep), scenario=sc.name, method=spec.method,
                   prior_mean=_fmt(spec.prior_mean), prior_sd=_fmt(spec.prior_sd),
                   miss_pct=_g(100.0 * sc.miss_prob), truth=_fmt(truths[i]))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                rep_ = run_method(data[i], spec, settings,
                                  _method_seed(master_seed, rep, sc.name, spec.label), prior)
            row.update(point=_fmt(rep_.point), se=_fmt(rep_.se), ci_low=_fmt(rep_.ci_low),
                       ci_high=_fmt(rep_.ci_high), covered=str(int(covered(rep_, truths[i]))),
                       status="ok", df=_fmt(rep_.aux.get("df")))
        except (RefBCMError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            kind = "nonestimable" if isinstance(exc, NonEstimableError) else "failed"
            msg = f"{kind}: {type(exc).__name__}: {exc}".replace("\n", " ")
            row.update(point="", se="", ci_low="", ci_high="", covered="", status=msg, df="")
        row["seconds"] = f"{time.perf_counter() - t0:.3f}"
        rows.append(row)
    return rows


def _read_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _worker(args):
    return run_replication(*args)


def run_benchmark(scenarios, methods, n_reps, log_path, settings=None, master_seed=0,
                  jobs=1, prior=None, truth_cache=None, n_mc=2_000_000, progress=None,
                  first_rep=0):
    """Run (or resume) a benchmark and return its :class:`BenchmarkTable`.

    Parameters
    ----------
    scenarios : list of SimScenario
        Scenario names must be distinct.
    methods : list of (int, MethodSpec)
        Scenario index and estimator.
    n_reps : int
    log_path : path
        Per-replication log CSV; rows are appended as replications finish.
    jobs : int
        Worker processes (spawned); 1 runs in-process.
    progress : callable, optional
        Called with ``(rep, rows)`` after each finished replication.
    """
    settings = settings or MethodSettings()
    names = [sc.name for sc in scenarios]
    if len(set(names)) != len(names):
        raise ValueError("scenario names must be distinct")
    truths = [scenario_truth(sc, n_mc, truth_cache) for sc in scenarios]
    log_path = Path(log_path)
    expected = len(methods)
    done = {}
    if log_path.exists() and log_path.stat().st_size:
        for row in _read_log(log_path):
            done.setdefault(int(row["rep"]), []).append(row)
    complete = {r: rows for r, rows in done.items() if len(rows) == expected}
    todo = [r for r in range(first_rep, first_rep + n_reps) if r not in complete]
    # rewrite the log without partial replications, then append
    log_path.parent.mkdir(parents=True, exist_ok=True)
    kept = [row for r in sorted(complete) for row in complete[r]]
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(kept)
    args = [(r, scenarios, methods, settings, truths, master_seed, prior) for r in todo]
    with open(log_path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)

        def emit(rows):
            w.writerows(rows)
            fh.flush()
            os.fsync(fh.fileno())
            if progress is not None:
                progress(int(rows[0]["rep"]), rows)

        if jobs <= 1:
            for a in args:
                emit(_worker(a))
        else:
            with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as ex:
                for rows in ex.map(_worker, args):
                    emit(rows)
    rows = _read_log(log_path)
    wanted = set(range(first_rep, first_rep + n_reps))
    return BenchmarkTable.from_log([r for r in rows if int(r["rep"]) in wanted])


# -- aggregation ----------------------------------------------------------------------


@dataclass(frozen=True)
class TableRow:
    scenario: str
    method: str
    prior: str
    miss_pct: str
    truth: float
    mean: float
    emp_se: float
    est_se: float
    coverage: float
    mcse_mean: float
    n_reps: int
    failures: int


class BenchmarkTable:
    """Mean, Emp.SE, Est.SE and coverage (%) per (scenario, method, prior).

    Rows appear in first-seen log order. ``emp_se`` is the SD (ddof=1) of
    the point estimates, ``est_se`` the mean reported SE and ``mcse_mean``
    ``emp_se / sqrt(n_reps)``; failed replications are excluded and counted.
    """

    def __init__(self, rows):
        self.rows = list(rows)

    @classmethod
    def from_log(cls, log_rows):
        groups = {}
        for row in sorted(log_rows, key=lambda r: int(r["rep"])):
            key = (row["scenario"], row["method"], row["prior_mean"], row["prior_sd"],
                   row["miss_pct"])
            groups.setdefault(key, []).append(row)
        out = []
        for (scen, method, pm, psd, miss), rows in groups.items():
            ok = [r for r in rows if r["status"] == "ok"]
            pts = np.array([float(r["point"]) for r in ok])
            ses = np.array([float(r["se"]) for r in ok])
            cov = np.array([int(r["covered"]) for r in ok])
            n = len(ok)
            emp = float(pts.std(ddof=1)) if n > 1 else math.nan
            prior = "-" if pm == "" else f"N({_g(pm)},{_g(psd)}^2)"
            out.append(TableRow(
                scen, method, prior, miss, float(rows[0]["truth"]),
                float(pts.mean()) if n else math.nan, emp,
                float(ses.mean()) if n else math.nan,
                100.0 * float(cov.mean()) if n else math.nan,
                emp / math.sqrt(n) if n > 1 else math.nan, n, len(rows) - n,
            ))
        return cls(out)

    @classmethod
    def from_log_file(cls, path):
        return cls.from_log(_read_log(path))

    def find(self, method, miss_pct=None, prior_sd=None, scenario=None):
        """Rows matching the given method and optional filters."""
        out = []
        for r in self.rows:
            if r.method != method:
                continue
            if miss_pct is not None and float(r.miss_pct) != float(miss_pct):
                continue
            if prior_sd is not None and r.prior != f"N(0,{_g(prior_sd)}^2)":
                continue
            if scenario is not None and r.scenario != scenario:
                continue
            out.append(r)
        return out

    def _cells(self, r):
        return [r.scenario, r.method, r.prior, r.miss_pct, f"{r.truth:.4f}", f"{r.mean:.4f}",
                f"{r.emp_se:.4f}", f"{r.est_se:.4f}", f"{r.coverage:.1f}",
                f"{r.mcse_mean:.4f}", str(r.n_reps), str(r.failures)]

    def to_csv(self, path=None):
        lines = [",".join(TABLE_FIELDS)]
        lines += [",".join(self._cells(r)) for r in self.rows]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def format(self):
        head = ["scenario", "method", "prior", "miss%", "truth", "Mean", "Emp.SE", "Est.SE",
                "Cov", "MCSE", "reps", "fail"]
        body = [self._cells(r) for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines = [fmt.format(*head), "  ".join("-" * w for w in widths)]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines)


def expand_methods(scenarios, method_texts, prior_mean=0.0, prior_sd=100.0):
    """Cartesian product of scenario indices and parsed method strings."""
    specs = [MethodSpec.parse(t, prior_mean, prior_sd) for t in method_texts]
    return [(i, s) for i in range(len(scenarios)) for s in specs]


def with_missingness(sc: SimScenario, miss_prob, name=None):
    return sc.replace(miss_prob=miss_prob, name=name or f"{sc.name}@{_g(miss_prob)}")
