"""Command-line interface.

    refbcm simulate  --preset hd-hm-k0-0 --seed 1 --out trial.csv
    refbcm analyze   trial.csv --method bcm --prior-sd 100
    refbcm benchmark --preset hd-hm-k0-0 --method bcm --method rd --reps 500 --out run/
    refbcm summarize run/log.csv

Exit codes: 0 success, 2 configuration or usage error, 3 data validation or
I/O error, 4 non-estimable imputation model, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import MethodSettings, RunConfig, load_config, load_preset, preset_names
from .exceptions import (ConfigError, ConvergenceWarning, NonEstimableError, NumericalError,
                         TrialParseError, TrialValidationError)
from .harness import (LOG_FIELDS, METHODS, BenchmarkTable, MethodSpec, expand_methods,
                      run_benchmark, run_method)
from .simulation import simulate_trial
from .trial import format_summary, read_csv, summarize, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONEST, EXIT_NUMERIC = 0, 2, 3, 4, 5
MIN_REPS = 50


def _config(args, preset=None):
    """RunConfig from --preset and/or --config (config values win)."""
    cfg = None
    preset = preset or getattr(args, "preset", None)
    if preset:
        cfg = load_preset(preset)
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    return cfg or RunConfig()


def _settings(args, cfg):
    s = cfg.settings
    if getattr(args, "paper_scale", False):
        s = MethodSettings.paper_scale(chains=s.chains, warmup=s.warmup, keep=s.keep,
                                       rbi_warmup=s.rbi_warmup, rbi_thin=s.rbi_thin)
    return s


def cmd_simulate(args):
    cfg = _config(args)
    sc = cfg.scenario
    ds = simulate_trial(sc, args.seed)
    out = Path(args.out)
    write_csv(ds, out, comment=f"scenario {sc.name}, replicate seed {args.seed}")
    print(f"wrote {ds.n} patients to {out}")
    return EXIT_OK


def cmd_analyze(args):
    cfg = _config(args)
    prior = cfg.prior
    mean = prior.k0_mean if args.prior_mean is None else args.prior_mean
    sd = prior.k0_sd if args.prior_sd is None else args.prior_sd
    spec = MethodSpec(args.method, mean, sd)
    ds = read_csv(args.data, schedule=args.schedule)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        report = run_method(ds, spec, _settings(args, cfg), args.seed, prior)
    for w in caught:
        if issubclass(w.category, ConvergenceWarning):
            print(f"warning: {w.message}", file=sys.stderr)
    print(report.format())
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_benchmark(args):
    cfg = _config(args, preset=(args.preset or [None])[0])
    scenarios = [cfg.scenario]
    for name in (args.preset or [])[1:]:
        scenarios.append(load_preset(name).scenario)
    bench = cfg.benchmark
    methods = args.method or bench.get("methods") or ["bcm"]
    reps = args.reps if args.reps is not None else bench.get("reps", 500)
    if args.paper_scale and args.reps is None and "reps" not in bench:
        reps = 5000
    seed = args.seed if args.seed is not None else bench.get("seed", 0)
    jobs = args.jobs if args.jobs is not None else bench.get("jobs", 1)
    if reps < MIN_REPS and not args.force:
        raise ConfigError(f"--reps must be at least {MIN_REPS} (use --force for smoke runs)")
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    mean = cfg.prior.k0_mean if args.prior_mean is None else args.prior_mean
    sd = cfg.prior.k0_sd if args.prior_sd is None else args.prior_sd
    try:
        pairs = expand_methods(scenarios, methods, mean, sd)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rep, rows):
        if args.verbose:
            print(f"replication {rep} done", file=sys.stderr, flush=True)

    table = run_benchmark(scenarios, pairs, reps, out / "log.csv", _settings(args, cfg),
                          master_seed=seed, jobs=jobs, prior=cfg.prior,
                          truth_cache=out / "truth.json", progress=progress)
    table.to_csv(out / "table.csv")
    print(table.format())
    return EXIT_OK


def cmd_summarize(args):
    path = Path(args.path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.split(",")[: len(LOG_FIELDS)] == list(LOG_FIELDS):
        table = BenchmarkTable.from_log_file(path)
        print(table.format())
        if args.out:
            table.to_csv(args.out)
        return EXIT_OK
    ds = read_csv(path, schedule=args.schedule)
    text = format_summary(summarize(ds))
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="refbcm", description="Reference-based Bayesian causal "
                                "model for post-ICE outcomes in longitudinal trials.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON configuration file")
        sp.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("simulate", help="simulate one trial and write it as CSV")
    common(s)
    s.add_argument("--preset", choices=preset_names())
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate, seed_default=0)

    a = sub.add_parser("analyze", help="estimate the treatment-policy effect from a CSV")
    common(a)
    a.add_argument("data")
    a.add_argument("--method", choices=METHODS, default="bcm")
    a.add_argument("--prior-mean", type=float, default=None, help="k0 prior mean")
    a.add_argument("--prior-sd", type=float, default=None, help="k0 prior SD")
    a.add_argument("--schedule", help="visit schedule file (default: companion file)")
    a.add_argument("--preset", choices=preset_names(), help=argparse.SUPPRESS)
    a.add_argument("--paper-scale", action="store_true")
    a.add_argument("--out", help="write the JSON report here instead of stdout")
    a.set_defaults(func=cmd_analyze, seed_default=0)

    b = sub.add_parser("benchmark", help="replicated simulation study")
    common(b)
    b.add_argument("--preset", action="append", choices=preset_names(),
                   help="scenario preset (repeatable)")
    b.add_argument("--method", action="append",
                   help="method, optionally with k0 prior SD as 'bcm:0.5' (repeatable)")
    b.add_argument("--reps", type=int, default=None)
    b.add_argument("--jobs", type=int, default=None)
    b.add_argument("--prior-mean", type=float, default=None)
    b.add_argument("--prior-sd", type=float, default=None)
    b.add_argument("--paper-scale", action="store_true",
                   help="B=200 resamples, M=50/100 imputations and 5000 replications "
                        "unless --reps is given")
    b.add_argument("--force", action="store_true", help="allow fewer than 50 replications")
    b.add_argument("--verbose", action="store_true")
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_benchmark, seed_default=None)

    m = sub.add_parser("summarize", help="aggregate a benchmark log or summarise a trial CSV")
    m.add_argument("path")
    m.add_argument("--schedule")
    m.add_argument("--out")
    m.set_defaults(func=cmd_summarize, seed_default=0)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.seed_default is not None:
        args.seed = args.seed_default
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonEstimableError as exc:
        print(f"non-estimable: {exc}", file=sys.stderr)
        return EXIT_NONEST
    except (TrialParseError, TrialValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
