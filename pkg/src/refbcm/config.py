"""Scenario / prior / method-settings configuration files (TOML or JSON).

A configuration file has up to four tables; every key is optional::

    preset = "hd-hm-k0-0"       # start from a bundled preset

    [scenario]                  # SimScenario fields
    n_per_arm = 500
    miss_prob = 0.9
    true_k0 = 0.0
    beta0 = -13.0

    [prior]                     # PriorSpec fields
    k0_mean = 0.0
    k0_sd = 100.0

    [settings]                  # MethodSettings fields
    chains = 2
    warmup = 300

    [benchmark]
    methods = ["bcm:100", "rd", "rbi-j2r"]
    reps = 500
    seed = 1

Unknown keys and invalid values raise :class:`ConfigError` pointing at the
offending line.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .exceptions import ConfigError
from .inference.priors import PriorSpec
from .simulation import SimScenario

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SECTIONS = ("scenario", "prior", "settings", "benchmark")
BENCHMARK_KEYS = ("methods", "reps", "seed", "jobs")


@dataclass(frozen=True)
class MethodSettings:
    """Computational settings shared by the estimators.

    Desk-scale defaults; :meth:`paper_scale` returns the larger settings.
    """

    chains: int = 2
    warmup: int = 300
    keep: int = 1000
    bootstrap: int = 100
    imputations: int = 25
    rd_imputations: int = 25
    rbi_imputations: int = 50
    rbi_warmup: int = 200
    rbi_thin: int = 50

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or int(v) != v:
                raise ValueError(f"{f.name} must be an integer")
            object.__setattr__(self, f.name, int(v))
        minimum = dict(chains=1, warmup=0, keep=2, bootstrap=2, imputations=1,
                       rd_imputations=2, rbi_imputations=2, rbi_warmup=0, rbi_thin=1)
        for name, lo in minimum.items():
            if getattr(self, name) < lo:
                raise ValueError(f"{name} must be at least {lo}")

    @classmethod
    def paper_scale(cls, **changes):
        base = dict(bootstrap=200, imputations=50, rd_imputations=100, rbi_imputations=100)
        base.update(changes)
        return cls(**base)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig:
    scenario: SimScenario = field(default_factory=SimScenario)
    prior: PriorSpec = field(default_factory=PriorSpec)
    settings: MethodSettings = field(default_factory=MethodSettings)
    benchmark: dict = field(default_factory=dict)
    source: str | None = None


# -- presets ------------------------------------------------------------------------


def preset_names():
    folder = resources.files("refbcm") / "presets"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".toml"))


def preset_path(name):
    folder = resources.files("refbcm") / "presets"
    path = folder / f"{name}.toml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return Path(str(path))


# -- parsing ------------------------------------------------------------------------


def _key_line(text, key, section=None):
    """1-based line of ``key`` (inside ``[section]`` when given), else None."""
    lines = text.splitlines()
    in_section = section is None
    toml_key = re.compile(rf"^\s*{re.escape(key)}\s*=")
    json_key = re.compile(rf'"{re.escape(key)}"\s*:')
    for i, line in enumerate(lines, 1):
        stripped = line.strip()
        if section is not None and stripped.startswith("["):
            in_section = stripped.strip("[] ") == section
            continue
        if section is not None and re.search(rf'"{re.escape(section)}"\s*:', line):
            in_section = True
        if in_section and (toml_key.search(line) or json_key.search(line)):
            return i
    return None


def _parse_text(text, fmt, path):
    if fmt == "json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, line=exc.lineno, path=path) from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        line = int(m.group(1)) if m else None
        msg = re.sub(r"\s*\(at line \d+, column \d+\)", "", str(exc))
        raise ConfigError(msg, line=line, path=path) from None


def _build(cls, raw, text, section, path, base=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table", line=_key_line(text, section), path=path)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names or key == "extra":
            raise ConfigError(f"unknown key {key!r} in [{section}]",
                              line=_key_line(text, key, section), path=path)
    values = dataclasses.asdict(base) if base is not None else {}
    values.pop("extra", None)
    values.update(raw)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        bad = [k for k in raw if re.search(rf"\b{re.escape(k)}\b", str(exc))]
        line = _key_line(text, bad[0], section) if bad else None
        raise ConfigError(f"[{section}] {exc}", line=line, path=path) from None


def parse_config(text, fmt="toml", path=None, base=None):
    """Parse configuration text into a :class:`RunConfig`.

    Parameters
    ----------
    text : str
    fmt : {'toml', 'json'}
    path : str, optional
        Used in error messages only.
    base : RunConfig, optional
        Values not set in ``text`` are taken from here.
    """
    raw = _parse_text(text, fmt, path)
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a table", path=path)
    for key in raw:
        if key not in SECTIONS and key != "preset":
            raise ConfigError(f"unknown section or key {key!r}", line=_key_line(text, key),
                              path=path)
    if "preset" in raw:
        try:
            base = load_config(preset_path(raw["preset"]), base=base)
        except ConfigError as exc:
            if exc.path is not None:
                raise
            raise ConfigError(str(exc), line=_key_line(text, "preset"), path=path) from None
    base = base or RunConfig()
    scenario = _build(SimScenario, raw.get("scenario", {}), text, "scenario", path, base.scenario)
    prior = _build(PriorSpec, raw.get("prior", {}), text, "prior", path, base.prior)
    settings = _build(MethodSettings, raw.get("settings", {}), text, "settings", path,
                      base.settings)
    bench = dict(base.benchmark)
    braw = raw.get("benchmark", {})
    for key, value in braw.items():
        if key not in BENCHMARK_KEYS:
            raise ConfigError(f"unknown key {key!r} in [benchmark]",
                              line=_key_line(text, key, "benchmark"), path=path)
        bench[key] = value
    if "methods" in braw:
        methods = braw["methods"]
        if isinstance(methods, str) or not all(isinstance(m, str) for m in methods):
            raise ConfigError("methods must be a list of strings",
                              line=_key_line(text, "methods", "benchmark"), path=path)
    for key in ("reps", "seed", "jobs"):
        if key in braw and (not isinstance(braw[key], int) or isinstance(braw[key], bool)
                            or braw[key] < 0):
            raise ConfigError(f"{key} must be a non-negative integer",
                              line=_key_line(text, key, "benchmark"), path=path)
    return RunConfig(scenario, prior, settings, bench, source=str(path) if path else None)


def load_config(path, base=None):
    """Read a ``.toml`` or ``.json`` configuration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", path=path) from None
    fmt = "json" if path.suffix.lower() == ".json" else "toml"
    return parse_config(text, fmt, path, base)


def load_preset(name):
    return load_config(preset_path(name))


def dump_config(cfg):
    """JSON text of a :class:`RunConfig` (loadable by :func:`load_config`)."""
    raw = dict(
        scenario=cfg.scenario.to_dict(),
        prior=cfg.prior.to_dict(),
        settings=cfg.settings.to_dict(),
    )
    if cfg.benchmark:
        raw["benchmark"] = dict(cfg.benchmark)
    return json.dumps(raw, indent=2)
