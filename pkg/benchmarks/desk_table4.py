"""Desk-scale high-discontinuation, k0 = 0 benchmark (n = 500 per arm).

Runs the estimators needed for the acceptance checks on the 20% and 90%
missingness scenarios plus complete-data ANCOVA, streaming every replication
to ``desk_table4_log.csv``. Re-running resumes an interrupted log.

    python benchmarks/desk_table4.py --reps 500
"""

import argparse
import time
from pathlib import Path

from refbcm.config import MethodSettings, load_preset
from refbcm.harness import MethodSpec, run_benchmark

HERE = Path(__file__).resolve().parent
MASTER_SEED = 2024


def design():
    lm = load_preset("hd-lm-k0-0").scenario
    hm = load_preset("hd-hm-k0-0").scenario
    full = hm.replace(miss_prob=0.0, name="hd-none-k0-0")
    scenarios = [lm, hm, full]
    methods = [
        (0, MethodSpec("bcm", 0.0, 100.0)),
        (0, MethodSpec("bcm", 0.0, 0.5)),
        (0, MethodSpec("rd")),
        (1, MethodSpec("bcm", 0.0, 100.0)),
        (1, MethodSpec("bcm", 0.0, 0.5)),
        (1, MethodSpec("bcm-cmi-jk", 0.0, 100.0)),
        (1, MethodSpec("bcm-mi-bs", 0.0, 0.5)),
        (1, MethodSpec("rd")),
        (1, MethodSpec("rbi-j2r")),
        (2, MethodSpec("ancova-complete")),
    ]
    return scenarios, methods


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--log", default=str(HERE / "desk_table4_log.csv"))
    ap.add_argument("--table", default=str(HERE / "desk_table4_table.csv"))
    args = ap.parse_args(argv)
    scenarios, methods = design()
    t0 = time.time()

    def progress(rep, rows):
        print(f"rep {rep:4d} done  {time.time() - t0:8.1f}s", flush=True)

    table = run_benchmark(scenarios, methods, args.reps, args.log, MethodSettings(),
                          master_seed=MASTER_SEED, jobs=args.jobs,
                          truth_cache=HERE / "truth_cache.json", progress=progress)
    table.to_csv(args.table)
    print(table.format())


if __name__ == "__main__":
    main()
