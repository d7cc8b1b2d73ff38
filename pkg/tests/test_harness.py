import csv
import math
import statistics

import pytest

from refbcm.config import MethodSettings
from refbcm.harness import (BenchmarkTable, MethodSpec, expand_methods, run_benchmark,
                            with_missingness)
from refbcm.simulation import SimScenario

SMALL = SimScenario(name="small", n_per_arm=60, miss_prob=0.5)
PERF = SimScenario(name="perf", n_per_arm=60, miss_prob=1.0)
FAST = MethodSettings(rd_imputations=3)


def _run(tmp_path, name, scenarios=(SMALL,), methods=("rd", "ancova-complete"), reps=4, **kw):
    pairs = expand_methods(list(scenarios), list(methods))
    return run_benchmark(list(scenarios), pairs, reps, tmp_path / f"{name}.csv", FAST,
                         master_seed=11, n_mc=20_000, **kw)


def test_method_spec_parsing():
    s = MethodSpec.parse("bcm:0.5")
    assert (s.prior_mean, s.prior_sd) == (0.0, 0.5)
    s = MethodSpec.parse("bcm-mi-bs:1:0.25")
    assert (s.prior_mean, s.prior_sd) == (1.0, 0.25)
    assert math.isnan(MethodSpec.parse("rd").prior_sd)
    with pytest.raises(ValueError):
        MethodSpec.parse("bcm:x")
    with pytest.raises(ValueError):
        MethodSpec.parse("nope")


def _oracle_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cells = {}
    for r in rows:
        key = (r["scenario"], r["method"])
        c = cells.setdefault(key, dict(pts=[], ses=[], cov=[], fail=0))
        if r["status"] != "ok":
            c["fail"] += 1
            continue
        c["pts"].append(float(r["point"]))
        c["ses"].append(float(r["se"]))
        c["cov"].append(int(r["covered"]))
    return cells


def test_aggregation_matches_one_pass_oracle(tmp_path):
    table = _run(tmp_path, "a")
    cells = _oracle_table(tmp_path / "a.csv")
    assert len(table.rows) == len(cells) == 2
    for row in table.rows:
        c = cells[(row.scenario, row.method)]
        assert row.mean == pytest.approx(statistics.fmean(c["pts"]), rel=1e-12)
        assert row.emp_se == pytest.approx(statistics.stdev(c["pts"]), rel=1e-12)
        assert row.est_se == pytest.approx(statistics.fmean(c["ses"]), rel=1e-12)
        assert row.coverage == pytest.approx(100 * statistics.fmean(c["cov"]))
        assert row.n_reps == 4 and row.failures == 0


def test_two_runs_identical(tmp_path):
    a = _run(tmp_path, "x").to_csv()
    b = _run(tmp_path, "y").to_csv()
    assert a == b
    assert (tmp_path / "x.csv").read_bytes() != b""
    assert BenchmarkTable.from_log_file(tmp_path / "x.csv").to_csv() == a


def test_failures_counted_and_isolated(tmp_path):
    table = _run(tmp_path, "f", scenarios=(SMALL, PERF))
    rd_perf = table.find("rd", scenario="perf")[0]
    assert rd_perf.failures == 4 and rd_perf.n_reps == 0
    assert table.find("rd", scenario="small")[0].failures == 0
    assert table.find("ancova-complete", scenario="perf")[0].n_reps == 4
    with open(tmp_path / "f.csv", newline="") as fh:
        statuses = [r["status"] for r in csv.DictReader(fh)]
    assert sum(s.startswith("nonestimable") for s in statuses) == 4


def test_resume_after_interruption(tmp_path):
    full = _run(tmp_path, "full").to_csv()
    _run(tmp_path, "part", reps=2)
    # simulate a crash half way through replication 2
    path = tmp_path / "part.csv"
    lines = (tmp_path / "full.csv").read_text().splitlines()
    header, body = lines[0], lines[1:]
    partial = [l for l in body if l.startswith("2,")][:1]
    path.write_text("\n".join([header] + body[:4] + partial) + "\n")
    resumed = _run(tmp_path, "part").to_csv()
    assert resumed == full


def test_parallel_matches_serial(tmp_path):
    a = _run(tmp_path, "s", reps=2).to_csv()
    b = _run(tmp_path, "p", reps=2, jobs=2).to_csv()
    assert a == b


def test_distinct_scenario_names(tmp_path):
    with pytest.raises(ValueError):
        _run(tmp_path, "d", scenarios=(SMALL, SMALL))


def test_with_missingness_names():
    sc = with_missingness(SMALL, 0.2)
    assert sc.miss_prob == 0.2 and sc.name == "small@0.2"


def test_table_format_and_find(tmp_path):
    table = _run(tmp_path, "t", reps=2)
    text = table.format()
    assert "Emp.SE" in text and "ancova-complete" in text
    assert table.find("rd", miss_pct=50)[0].prior == "-"
