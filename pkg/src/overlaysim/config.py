"""YAML experiment configs.

Unknown keys are errors.  Only two environment variables can override the
file: ``OVERLAYSIM_SEED`` and ``OVERLAYSIM_OUTPUT_DIR``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping

import yaml

from .engine import CostModel, EngineParams
from .topology import PlacementMode
from .workload import WorkloadSpec

ENV_SEED = "OVERLAYSIM_SEED"
ENV_OUTPUT_DIR = "OVERLAYSIM_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationTargets:
    direct_gbps: float | None = None
    overlay_gbps: float | None = None
    dpu_gbps: float | None = None
    ticks: int = 2000


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    csv: str = "results.csv"
    table: bool = True
    trace: bool = False
    figures: bool = False


@dataclass(frozen=True)
class RunConfig:
    """A single (mode, pairs) point with every knob resolved."""

    mode: PlacementMode
    pairs: int
    seed: int
    duration_ticks: int
    warmup_ticks: int
    workload: WorkloadSpec
    engine: EngineParams
    cost: CostModel
    vni_mode: str = "shared"
    base_vni: int = 1
    cache_capacity: int = 4096
    idle_timeout_ticks: int = 1000
    hw_capacity: int = 65536

    @property
    def link_gbps(self) -> float:
        return self.engine.link_gbps

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_seed(base: int, mode: PlacementMode | str, pairs: int) -> int:
    h = hashlib.sha256(f"{base}:{PlacementMode.parse(mode).value}:{pairs}".encode()).digest()
    return int.from_bytes(h[:4], "big") & 0x7FFFFFFF


@dataclass(frozen=True)
class ExperimentConfig:
    modes: tuple[PlacementMode, ...]
    pairs: tuple[int, ...]
    seed: int = 1
    duration_ticks: int = 100_000
    warmup_ticks: int = 1_000
    workload: WorkloadSpec = WorkloadSpec()
    engine: EngineParams = EngineParams()
    cost: CostModel = CostModel()
    vni_mode: str = "shared"
    base_vni: int = 1
    cache_capacity: int = 4096
    idle_timeout_ticks: int = 1000
    hw_capacity: int = 65536
    calibration: CalibrationTargets = CalibrationTargets()
    output: OutputSpec = OutputSpec()
    name: str = "experiment"
    source: Path | None = field(default=None, compare=False)

    def run_config(self, mode: PlacementMode | str, pairs: int) -> RunConfig:
        mode = PlacementMode.parse(mode)
        return RunConfig(mode, pairs, run_seed(self.seed, mode, pairs), self.duration_ticks,
                         self.warmup_ticks, self.workload, self.engine, self.cost,
                         self.vni_mode, self.base_vni, self.cache_capacity,
                         self.idle_timeout_ticks, self.hw_capacity)

    def runs(self) -> Iterator[RunConfig]:
        for mode in self.modes:
            for n in self.pairs:
                yield self.run_config(mode, n)

    @property
    def output_dir(self) -> Path:
        # relative to the working directory, so shipped configs never write into the package
        return Path(self.output.dir)


# -- parsing -------------------------------------------------------------

_SECTIONS = {
    "workload": WorkloadSpec,
    "engine": EngineParams,
    "calibration": CalibrationTargets,
    "output": OutputSpec,
}
_NETWORK_KEYS = {"vni_mode", "base_vni", "link_gbps"}
_SWITCH_KEYS = {"cache_capacity", "idle_timeout_ticks", "hw_capacity"}
_TOP_KEYS = {"name", "mode", "modes", "pairs", "seed", "duration_ticks", "duration_ms",
             "warmup_ticks", "warmup_ms", "network", "switch", "cost_model", *_SECTIONS}


def _check_keys(where: str, data: Any, allowed) -> Mapping:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(map(str, data)) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return data


def _build(where: str, cls, data: Any, extra: Mapping | None = None):
    names = {f.name: f for f in dataclasses.fields(cls)}
    data = dict(_check_keys(where, data, names))
    data.update(extra or {})
    for key, value in data.items():
        default = names[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}.{key}: expected true/false")
        if isinstance(value, bool) and not isinstance(default, bool):
            raise ConfigError(f"{where}.{key}: expected a number")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _int(where: str, value, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{where}: must be at least {minimum}")
    return int(value)


def _ticks(data: Mapping, name: str, tick_us: float, default: int) -> int:
    if f"{name}_ticks" in data and f"{name}_ms" in data:
        raise ConfigError(f"give only one of {name}_ticks and {name}_ms")
    if f"{name}_ms" in data:
        ms = data[f"{name}_ms"]
        if isinstance(ms, bool) or not isinstance(ms, (int, float)) or ms < 0:
            raise ConfigError(f"{name}_ms: expected a non-negative number")
        return round(ms * 1000 / tick_us)
    if f"{name}_ticks" in data:
        return _int(f"{name}_ticks", data[f"{name}_ticks"])
    return default


def _cost_model(value, base_dir: Path | None) -> CostModel:
    if value is None:
        return CostModel()
    if isinstance(value, str):
        path = Path(value)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            return CostModel.load(path)
        except OSError as exc:
            raise ConfigError(f"cost_model: cannot read {path}: {exc.strerror}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cost_model: {path}: {exc}") from None
    if isinstance(value, Mapping):
        value = dict(value)
        base = value.pop("file", None)
        model = _cost_model(base, base_dir) if base is not None else CostModel()
        known = {f.name for f in dataclasses.fields(CostModel)}
        _check_keys("cost_model", value, known)
        try:
            return dataclasses.replace(model, **value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"cost_model: {exc}") from None
    raise ConfigError("cost_model: expected a file path or a mapping")


def parse_config(data: Any, source: Path | None = None,
                 environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    data = _check_keys("config", data, _TOP_KEYS)
    base_dir = source.parent if source is not None else None

    if "mode" in data and "modes" in data:
        raise ConfigError("give only one of mode and modes")
    raw_modes = data.get("modes", data.get("mode"))
    if raw_modes is None:
        raise ConfigError("modes: required")
    if isinstance(raw_modes, str):
        raw_modes = [raw_modes]
    try:
        modes = tuple(PlacementMode.parse(m) for m in raw_modes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"modes: {exc}") from None
    if not modes:
        raise ConfigError("modes: at least one mode required")

    raw_pairs = data.get("pairs")
    if raw_pairs is None:
        raise ConfigError("pairs: required")
    if not isinstance(raw_pairs, list):
        raw_pairs = [raw_pairs]
    pairs = tuple(_int("pairs", p, 1) for p in raw_pairs)
    if not pairs:
        raise ConfigError("pairs: at least one pair count required")

    seed = _int("seed", data.get("seed", 1))
    if ENV_SEED in environ:
        try:
            seed = int(environ[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED}: not an integer") from None

    network = _check_keys("network", data.get("network"), _NETWORK_KEYS)
    switch = _check_keys("switch", data.get("switch"), _SWITCH_KEYS)
    engine_extra = {"link_gbps": network["link_gbps"]} if "link_gbps" in network else {}
    engine = _build("engine", EngineParams, data.get("engine"), engine_extra)
    if engine.link_gbps <= 0 or engine.tick_us <= 0:
        raise ConfigError("engine: link rate and tick length must be positive")
    workload = _build("workload", WorkloadSpec, data.get("workload"))
    calibration = _build("calibration", CalibrationTargets, data.get("calibration"))
    output = _build("output", OutputSpec, data.get("output"))
    if ENV_OUTPUT_DIR in environ:
        output = dataclasses.replace(output, dir=environ[ENV_OUTPUT_DIR])

    for key in ("direct_gbps", "overlay_gbps", "dpu_gbps"):
        target = getattr(calibration, key)
        if target is not None and not 0 < target <= engine.link_gbps:
            raise ConfigError(f"calibration.{key}: {target} Gb/s is outside (0, {engine.link_gbps}]")
    if calibration.ticks < 10:
        raise ConfigError("calibration.ticks: must be at least 10")

    duration = _ticks(data, "duration", engine.tick_us, 100_000)
    warmup = _ticks(data, "warmup", engine.tick_us, 1_000)
    if duration < 1:
        raise ConfigError("duration: must be positive")
    if duration < warmup:
        raise ConfigError(f"duration ({duration} ticks) is shorter than warmup ({warmup} ticks)")

    vni_mode = network.get("vni_mode", "shared")
    if vni_mode not in ("shared", "per_pair"):
        raise ConfigError(f"network.vni_mode: expected shared or per_pair, got {vni_mode!r}")

    return ExperimentConfig(
        modes=modes, pairs=pairs, seed=seed, duration_ticks=duration, warmup_ticks=warmup,
        workload=workload, engine=engine, cost=_cost_model(data.get("cost_model"), base_dir),
        vni_mode=vni_mode,
        base_vni=_int("network.base_vni", network.get("base_vni", 1)),
        cache_capacity=_int("switch.cache_capacity", switch.get("cache_capacity", 4096), 1),
        idle_timeout_ticks=_int("switch.idle_timeout_ticks", switch.get("idle_timeout_ticks", 1000), 1),
        hw_capacity=_int("switch.hw_capacity", switch.get("hw_capacity", 65536)),
        calibration=calibration, output=output,
        name=str(data.get("name", source.stem if source else "experiment")),
        source=source,
    )


def load_config(path, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(data, path, environ)
