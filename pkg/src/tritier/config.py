"""Run configuration: one JSON document with named nested sections, each field defaulted."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .catalog import FEATURE_NAMES, CatalogSettings
from .meso import MesoConfig
from .orchestrator import LatencyConfig, LatencyStatus, LoopConfig, validate_latency
from .plant import PlantParams, ScenarioParams
from .realtime import TrackingConfig
from .solvers import SqpSettings


class ConfigError(ValueError):
    """Invalid or incomplete configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


# keys that must be present whenever their section is given at all
REQUIRED_IN_SECTION = {"latency": ("t1", "t2")}


@dataclass
class ScenarioConfig:
    """Forecast series plus the unforeseen inflow step applied to the true plant."""

    inflow_series: List[float] = field(default_factory=lambda: [1.0] * 12)
    price_series: List[float] = field(
        default_factory=lambda: [50.0 - 20.0 * float(np.cos(2 * np.pi * (k + 0.5) / 12)) for k in range(12)])
    u_max: float = 3.0
    level_bounds: Tuple[float, float] = (1.0, 2.3)
    horizon: float = 3600.0
    h_init: float = 2.0
    step_time: float = 1800.0
    step_size: float = 0.0
    feature_ranges: List[List[float]] = field(
        default_factory=lambda: [[0.5, 1.5], [0.0, 0.5], [30.0, 70.0], [0.0, 40.0], [1.8, 2.2]])

    def forecast(self) -> ScenarioParams:
        return ScenarioParams(np.array(self.inflow_series), np.array(self.price_series), self.u_max,
                              tuple(self.level_bounds), self.horizon, 0.0, self.h_init)

    def truth(self) -> ScenarioParams:
        fc = self.forecast()
        seg = self.horizon / fc.n_segments
        starts = seg * np.arange(fc.n_segments)
        inflow = fc.inflow_series + np.where(starts >= self.step_time - 1e-9, self.step_size, 0.0)
        return ScenarioParams(inflow, fc.price_series, self.u_max, tuple(self.level_bounds), self.horizon, 0.0,
                              self.h_init)


@dataclass
class CatalogConfig:
    n_scenarios: int = 6
    starts_per_scenario: int = 2
    sigma_thresh: float = 1e3
    k: int = 3
    intervals: int = 6
    sqp_budget: int = 8
    probes: int = 3
    workers: int = 1
    feedback_radius: float = 1.0

    def settings(self) -> CatalogSettings:
        return CatalogSettings(intervals=self.intervals, starts_per_scenario=self.starts_per_scenario,
                               sqp_budget=self.sqp_budget, probes=self.probes, sigma_thresh=self.sigma_thresh)


@dataclass
class MesoSection:
    pool_size: int = 4
    intervals: int = 6
    sqp_budget: int = 3
    energy_target: float = 0.9999
    sigma_mut: float = 0.1
    v_tol: float = 0.05
    horizon: float = 3600.0
    validity_margin: float = 600.0


@dataclass
class RealtimeSection:
    horizon_steps: int = 10
    q_weight: float = 1.0
    r_weight: float = 1.0
    deadline: float = 1.0
    window: int = 10
    forgetting: float = 0.9
    prior_weight: float = 0.1


@dataclass
class SensorSection:
    cells: Optional[List[int]] = None
    noise_std: float = 0.01
    delta_ok: float = 0.05


@dataclass
class RunConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    meso: MesoSection = field(default_factory=MesoSection)
    realtime: RealtimeSection = field(default_factory=RealtimeSection)
    catalog: CatalogConfig = field(default_factory=CatalogConfig)
    sensors: SensorSection = field(default_factory=SensorSection)
    seed: int = 0
    output_dir: str = "out"

    def sensor_cells(self) -> List[int]:
        if self.sensors.cells is not None:
            return list(self.sensors.cells)
        return list(range(2, self.plant.n_cells, 5))

    def loop_config(self) -> LoopConfig:
        m, rt = self.meso, self.realtime
        meso = MesoConfig(pool_size=m.pool_size, intervals=m.intervals, sqp_budget=m.sqp_budget,
                          energy_target=m.energy_target, sigma_mut=m.sigma_mut, v_tol=m.v_tol, horizon=m.horizon,
                          validity_margin=m.validity_margin,
                          sqp=SqpSettings(grad_step=1e-4, tol_stationarity=1e-6))
        tracking = TrackingConfig(horizon_steps=rt.horizon_steps, q_weight=rt.q_weight, r_weight=rt.r_weight,
                                  u_max=self.scenario.u_max, deadline=rt.deadline, window=rt.window,
                                  forgetting=rt.forgetting, prior_weight=rt.prior_weight)
        return LoopConfig(latency=self.latency, meso=meso, tracking=tracking, horizon=self.scenario.horizon,
                          sensor_cells=tuple(self.sensor_cells()), noise_std=self.sensors.noise_std,
                          delta_ok=self.sensors.delta_ok, feedback_radius=self.catalog.feedback_radius)


_SECTIONS = {
    "plant": PlantParams, "scenario": ScenarioConfig, "latency": LatencyConfig, "meso": MesoSection,
    "realtime": RealtimeSection, "catalog": CatalogConfig, "sensors": SensorSection,
}


def _build_section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(name, "section must be an object")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    for key in REQUIRED_IN_SECTION.get(name, ()):
        if key not in raw:
            raise ConfigError(f"{name}.{key}", "missing required field")
    kwargs = {}
    for key, value in raw.items():
        if isinstance(value, list) and key == "level_bounds":
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def _check_numbers(cfg: RunConfig) -> None:
    if cfg.catalog.n_scenarios < 0:
        raise ConfigError("catalog.n_scenarios", "must be >= 0")
    if cfg.catalog.starts_per_scenario < 1:
        raise ConfigError("catalog.starts_per_scenario", "must be >= 1")
    if cfg.catalog.k < 1:
        raise ConfigError("catalog.k", "must be >= 1")
    if len(cfg.scenario.feature_ranges) != len(FEATURE_NAMES):
        raise ConfigError("scenario.feature_ranges", f"need {len(FEATURE_NAMES)} (lo, hi) pairs")
    if len(cfg.scenario.inflow_series) != len(cfg.scenario.price_series):
        raise ConfigError("scenario.price_series", "length must match scenario.inflow_series")
    if cfg.meso.pool_size < 1:
        raise ConfigError("meso.pool_size", "must be >= 1")
    if cfg.meso.intervals < 1:
        raise ConfigError("meso.intervals", "must be >= 1")
    if not 0 < cfg.meso.energy_target <= 1:
        raise ConfigError("meso.energy_target", "must lie in (0, 1]")
    if cfg.realtime.deadline > cfg.latency.t1:
        raise ConfigError("realtime.deadline", "must not exceed latency.t1")
    for c in cfg.sensor_cells():
        if not 0 <= c < cfg.plant.n_cells:
            raise ConfigError("sensors.cells", f"cell {c} outside [0, {cfg.plant.n_cells})")
    status, msg = validate_latency(cfg.latency)
    if status is LatencyStatus.ERROR:
        raise ConfigError("latency", msg)
    try:
        cfg.scenario.forecast()
    except ValueError as exc:
        raise ConfigError("scenario", str(exc)) from None


def parse_config(raw: Dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key in ("seed", "output_dir"):
            kwargs[key] = value
        else:
            raise ConfigError(key, "unknown section")
    if not isinstance(kwargs.get("seed", 0), int):
        raise ConfigError("seed", "must be an integer")
    cfg = RunConfig(**kwargs)
    _check_numbers(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON ({exc.msg} at line {exc.lineno})") from None
    cfg = parse_config(raw)
    base = os.path.dirname(os.path.abspath(path))
    if not os.path.isabs(cfg.output_dir):
        cfg.output_dir = os.path.join(base, cfg.output_dir)
    return cfg
