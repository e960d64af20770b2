"""Run configuration read from a TOML file.

Relative paths are resolved against the directory holding the file. A
minimal configuration is just::

    [run]
    master_seed = 7
    episodes = 1000
    output_dir = "out"

Unset input paths default to ``<output_dir>/inputs/``, which is where the
``testbed`` command writes its files.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .enhance import GAConfig
from .fragility import Fragility, FragilityCurve, TreeFragilityModel
from .network import NetworkConfig
from .simulation import CrewPool, SimulationConfig
from .testbed import TestbedSpec
from .weather import WeatherConfig, default_distributions

INPUT_NAMES = {
    "substations": "substations.csv",
    "roads": "roads.jsonl",
    "buildings": "buildings.csv",
    "tree_cover": "tree_cover.grid",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    master_seed: int = 1
    episodes: int = 1000
    lam: float = 0.8
    threads: int = 0  # 0: one worker per CPU
    report_stride: int = 10
    output_dir: Path = Path("out")
    inputs: dict = field(default_factory=dict)
    wind_samples: Path | None = None
    testbed: TestbedSpec = field(default_factory=TestbedSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    ga: GAConfig = field(default_factory=GAConfig)
    areas: list | None = None

    def __post_init__(self):
        for k, name in INPUT_NAMES.items():
            self.inputs.setdefault(k, self.output_dir / "inputs" / name)

    @property
    def workers(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)

    def out(self, name: str) -> Path:
        return self.output_dir / name

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"run.lambda = {self.lam} is outside [0, 1]")
        if self.episodes <= 0:
            raise ConfigError(f"run.episodes must be positive, got {self.episodes}")
        if self.report_stride <= 0:
            raise ConfigError(f"run.report_stride must be positive, got {self.report_stride}")
        if self.threads < 0:
            raise ConfigError("run.threads must be >= 0 (0 uses every CPU)")
        g = self.ga
        if g.population < 2 or g.generations < 0 or g.tournament < 1:
            raise ConfigError("ga: need population >= 2, generations >= 0, tournament >= 1")
        if not 0 < g.cap_min <= g.cap_max:
            raise ConfigError("ga: capacity limits must satisfy 0 < cap_min <= cap_max")
        if g.max_locations < 1:
            raise ConfigError("ga.max_locations must be at least 1")
        if g.degree_scaling not in ("multiply", "divide"):
            raise ConfigError("ga.degree_scaling must be 'multiply' or 'divide'")
        if self.wind_samples is not None and not Path(self.wind_samples).is_file():
            raise ConfigError(f"wind sample file not found: {self.wind_samples}")

    def require(self, *paths: Path, hint: str = ""):
        missing = [str(p) for p in paths if not Path(p).is_file()]
        if missing:
            msg = "missing file(s): " + ", ".join(missing)
            raise ConfigError(msg + (f" ({hint})" if hint else ""))

    def require_inputs(self):
        self.require(*self.inputs.values(), hint="run the testbed command or set [inputs]")


def _build(cls, section: dict, where: str, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(names))}")
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _pop_section(doc, name):
    sec = doc.pop(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def from_dict(doc: dict, base: Path = Path(".")) -> RunConfig:
    doc = dict(doc)
    run = _pop_section(doc, "run")
    inputs = _pop_section(doc, "inputs")
    testbed = _pop_section(doc, "testbed")
    network = _pop_section(doc, "network")
    weather = _pop_section(doc, "weather")
    fragility = _pop_section(doc, "fragility")
    sim = _pop_section(doc, "simulation")
    ga = _pop_section(doc, "ga")
    if doc:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(doc))}")

    def path(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    allowed = {"master_seed", "episodes", "lambda", "threads", "report_stride", "output_dir", "areas"}
    unknown = sorted(set(run) - allowed)
    if unknown:
        raise ConfigError(f"[run] unknown key(s): {', '.join(unknown)}")
    try:
        kw = dict(
            master_seed=int(run.get("master_seed", 1)),
            episodes=int(run.get("episodes", 1000)),
            lam=float(run.get("lambda", 0.8)),
            threads=int(run.get("threads", 0)),
            report_stride=int(run.get("report_stride", 10)),
            output_dir=path(run.get("output_dir", "out")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[run] {exc}") from None
    areas = run.get("areas")
    if areas is not None and not (isinstance(areas, list) and all(isinstance(a, str) for a in areas)):
        raise ConfigError("[run] areas must be a list of substation names")

    wind = inputs.pop("wind_samples", None)
    unknown = sorted(set(inputs) - set(INPUT_NAMES))
    if unknown:
        raise ConfigError(f"[inputs] unknown key(s): {', '.join(unknown)}; allowed: "
                          f"{', '.join(sorted(INPUT_NAMES))}, wind_samples")
    tree_curve = fragility.pop("tree_curve", {})
    tree_alpha = fragility.pop("tree_alpha", 1.0)
    try:
        frag = Fragility(
            _build(FragilityCurve, fragility, "fragility"),
            TreeFragilityModel(float(tree_alpha), _build(FragilityCurve, tree_curve, "fragility.tree_curve")
                               if tree_curve else TreeFragilityModel().curve),
        )
    except ValueError as exc:
        raise ConfigError(f"[fragility] {exc}") from None
    crew_keys = {"n_crews", "repair_time_min", "repair_time_max"}
    crews = _build(CrewPool, {k: sim.pop(k) for k in list(sim) if k in crew_keys}, "simulation")
    wcfg = _build(WeatherConfig, weather, "weather")
    simcfg = _build(SimulationConfig, sim, "simulation", crews=crews, fragility=frag, weather=wcfg)
    if wind is not None:
        wind = path(wind)
        if not wind.is_file():
            raise ConfigError(f"wind sample file not found: {wind}")
        simcfg.gust, simcfg.sustained = default_distributions(wind)

    cfg = RunConfig(
        **kw,
        inputs={k: path(v) for k, v in inputs.items()},
        wind_samples=wind,
        testbed=_build(TestbedSpec, testbed, "testbed"),
        network=_build(NetworkConfig, network, "network"),
        simulation=simcfg,
        ga=_build(GAConfig, ga, "ga"),
        areas=areas,
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc, path.parent)
