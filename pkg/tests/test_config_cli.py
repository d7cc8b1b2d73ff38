import hashlib
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from refbcm.analysis import ancova_arrays
from refbcm.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NONEST, EXIT_NUMERIC, EXIT_OK, main
from refbcm.config import (ConfigError, MethodSettings, dump_config, load_config, load_preset,
                           parse_config, preset_names)
from refbcm.simulation import SimScenario, simulate_trial
from refbcm.trial import read_csv, write_csv


def test_presets_load():
    names = preset_names()
    assert len([n for n in names if n != "smoke"]) == 8
    for name in names:
        cfg = load_preset(name)
        assert cfg.scenario.name == name or name == "smoke"
    ld = load_preset("ld-lm-k0-1").scenario
    assert ld.beta0 == -15.0 and ld.miss_prob == 0.2 and ld.true_k0 == 1.0
    hd = load_preset("hd-hm-k0-0")
    assert hd.scenario.beta0 == -13.0 and hd.prior.k0_sd == 100.0


def test_smoke_preset_inherits():
    cfg = load_preset("smoke")
    assert cfg.scenario.n_per_arm == 10 and cfg.scenario.beta0 == -13.0
    assert cfg.settings.chains == 1


def test_toml_error_has_line():
    text = '[scenario]\nn_per_arm = 100\n\nrho = 1.5\n'
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 4 and "rho" in str(info.value)


def test_unknown_key_line():
    with pytest.raises(ConfigError) as info:
        parse_config('[prior]\nk0_mean = 0\nk0_sigma = 1\n')
    assert info.value.line == 3


def test_syntax_error_line():
    with pytest.raises(ConfigError) as info:
        parse_config('[settings]\nchains = \n')
    assert info.value.line == 2


def test_json_error_has_line():
    text = '{\n  "settings": {\n    "chains": 0\n  }\n}\n'
    with pytest.raises(ConfigError) as info:
        parse_config(text, "json")
    assert info.value.line == 3
    with pytest.raises(ConfigError) as info:
        parse_config('{\n "prior": {\n  "k0_sd": 1,\n }\n}', "json")
    assert info.value.line == 4


def test_benchmark_section_validation():
    cfg = parse_config('[benchmark]\nmethods = ["bcm", "rd"]\nreps = 60\n')
    assert cfg.benchmark == dict(methods=["bcm", "rd"], reps=60)
    with pytest.raises(ConfigError):
        parse_config('[benchmark]\nreps = -1\n')
    with pytest.raises(ConfigError):
        parse_config('[benchmark]\nmethods = "bcm"\n')


def test_dump_round_trip(tmp_path):
    cfg = load_preset("ld-hm-k0-1")
    path = tmp_path / "c.json"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back.scenario == cfg.scenario and back.prior == cfg.prior
    assert back.settings == cfg.settings


def test_settings_validation():
    with pytest.raises(ValueError):
        MethodSettings(chains=0)
    s = MethodSettings.paper_scale()
    assert (s.bootstrap, s.imputations, s.rd_imputations, s.rbi_imputations) == (200, 50, 100, 100)


# -- command line ----------------------------------------------------------------


def _md5(path):
    return hashlib.md5(path.read_bytes()).hexdigest()


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--preset", "hd-hm-k0-0", "--seed", "3", "--out", str(a)]) == 0
    assert main(["simulate", "--preset", "hd-hm-k0-0", "--seed", "3", "--out", str(b)]) == 0
    assert _md5(a) == _md5(b)
    ds = read_csv(a)
    want = simulate_trial(load_preset("hd-hm-k0-0").scenario, 3)
    assert np.array_equal(ds.y, want.y, equal_nan=True)


def test_simulate_subprocess_matches(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", "--preset", "ld-lm-k0-1", "--seed", "1", "--out", str(a)])
    r = subprocess.run([sys.executable, "-m", "refbcm.cli", "simulate", "--preset", "ld-lm-k0-1",
                        "--seed", "1", "--out", str(b)], capture_output=True, text=True)
    assert r.returncode == 0
    assert _md5(a) == _md5(b)


def test_analyze_ancova_complete(tmp_path, capsys):
    path = tmp_path / "t.csv"
    main(["simulate", "--preset", "hd-lm-k0-0", "--seed", "2", "--out", str(path)])
    out = tmp_path / "r.json"
    assert main(["analyze", str(path), "--method", "ancova-complete", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    ds = read_csv(path)
    keep = ~np.isnan(ds.y[:, -1])
    est, se, _ = ancova_arrays(ds.y[keep, -1], ds.baseline[keep], ds.treatment[keep])
    assert rep["point"] == pytest.approx(est, abs=1e-12) and rep["se"] == pytest.approx(se)
    assert "estimate" in capsys.readouterr().out


def test_analyze_smoke_config_fast(tmp_path, capsys):
    path = tmp_path / "s.csv"
    main(["simulate", "--preset", "smoke", "--seed", "0", "--out", str(path)])
    t0 = time.perf_counter()
    assert main(["analyze", str(path), "--method", "rd", "--preset", "smoke"]) in (0, 4)
    assert time.perf_counter() - t0 < 1.0


def test_exit_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[scenario]\nrho = 2\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert "bad.toml:2:" in capsys.readouterr().err


def test_exit_data_error(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "missing.csv")]) == EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("id,arm,base\n")
    assert main(["analyze", str(bad)]) == EXIT_DATA


def test_exit_non_estimable(tmp_path, capsys):
    path = tmp_path / "p.csv"
    ds = simulate_trial(SimScenario(n_per_arm=100, miss_prob=1.0), 0)
    write_csv(ds, path)
    assert main(["analyze", str(path), "--method", "rd"]) == EXIT_NONEST
    assert "rank deficient" in capsys.readouterr().err


def test_exit_numerical(tmp_path, capsys):
    # every active final visit missing: the complete-case ANCOVA has no treatment contrast
    ds = simulate_trial(SimScenario(n_per_arm=30, miss_prob=0.0), 0)
    y = ds.y.copy()
    y[ds.active, -1] = np.nan
    d = np.where(ds.active, ds.j_max - 1, ds.d)
    from refbcm.trial import TrialDataset
    bad = TrialDataset.from_arrays(ds.schedule, ds.ids, ds.active, ds.baseline, y, d)
    path = tmp_path / "n.csv"
    write_csv(bad, path)
    assert main(["analyze", str(path), "--method", "ancova-complete"]) == EXIT_NUMERIC


def test_benchmark_needs_force(tmp_path, capsys):
    args = ["benchmark", "--preset", "smoke", "--method", "rd", "--reps", "2",
            "--out", str(tmp_path / "b")]
    assert main(args) == EXIT_CONFIG
    assert main(args + ["--force"]) == EXIT_OK
    assert (tmp_path / "b" / "table.csv").exists()
    assert main(["summarize", str(tmp_path / "b" / "log.csv")]) == EXIT_OK
    assert "rd" in capsys.readouterr().out


def test_benchmark_bad_method(tmp_path):
    args = ["benchmark", "--preset", "smoke", "--method", "magic", "--reps", "2", "--force",
            "--out", str(tmp_path / "b")]
    assert main(args) == EXIT_CONFIG


def test_summarize_trial(tmp_path, capsys):
    path = tmp_path / "t.csv"
    main(["simulate", "--preset", "smoke", "--seed", "1", "--out", str(path)])
    capsys.readouterr()
    assert main(["summarize", str(path)]) == EXIT_OK
    assert capsys.readouterr().out.strip()
