"""Discrete-event closed loop: simulated clock, inter-tier bus and baseline comparisons."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .catalog import Catalog, ingest_feedback, query_nearest, scenario_features
from .meso import (
    DiscrepancyRecord, MesoConfig, MesoError, MesoLayer, Particle, ReferencePlan, assemble_plan,
    PlanSimFailed, mine_discrepancies, resample_controls,
)
from .plant import (
    ControlTrajectory, FailureReport, Observation, PlantParams, PlantState, ScenarioParams, advance, observe,
    simulate, stage_cost, still_water,
)
from .realtime import Mode, RealtimeLayer, RtDecision, TrackingConfig


class LatencyStatus(enum.Enum):
    OK = "ok"
    WARNING = "warning"
    ERROR = "error"


@dataclass
class LatencyConfig:
    t1: float = 30.0
    t2: float = 600.0
    offline_pretime: bool = True
    meso_compute: float = 45.0
    rt_cost_per_qp_iter: float = 0.01


def validate_latency(cfg: LatencyConfig):
    """Returns ``(status, message)``; T1 must be below T2, ideally by one to two orders of magnitude."""
    if not (cfg.t1 > 0 and cfg.t2 > 0):
        return LatencyStatus.ERROR, "latencies must be positive"
    if cfg.t1 >= cfg.t2:
        return LatencyStatus.ERROR, f"t1={cfg.t1} must be smaller than t2={cfg.t2}"
    if cfg.meso_compute > cfg.t2:
        return LatencyStatus.ERROR, f"meso_compute={cfg.meso_compute} exceeds t2={cfg.t2}"
    ratio = cfg.t2 / cfg.t1
    if not 10 <= ratio <= 100:
        return LatencyStatus.WARNING, f"t2/t1={ratio:g} outside [10, 100]"
    return LatencyStatus.OK, f"t2/t1={ratio:g}"


class Topic(enum.Enum):
    PLAN = "PLAN"
    SENSOR = "SENSOR"
    DISCREPANCY = "DISCREPANCY"
    CATALOG_UPDATE = "CATALOG_UPDATE"


@dataclass(frozen=True)
class Message:
    topic: Topic
    publish_time: float
    available_time: float
    payload: str
    seq: int


class CausalityError(AssertionError):
    pass


class MessageBus:
    """Append-only per-topic queues; reads never see messages that are not yet available."""

    def __init__(self):
        self._queues: Dict[Topic, List[Message]] = defaultdict(list)
        self._seq: Dict[Topic, int] = defaultdict(int)

    def publish(self, topic: Topic, payload: str, publish_time: float, available_time: Optional[float] = None) -> Message:
        available_time = publish_time if available_time is None else available_time
        if available_time < publish_time:
            raise ValueError("available_time must not precede publish_time")
        self._seq[topic] += 1
        msg = Message(topic, publish_time, available_time, payload, self._seq[topic])
        self._queues[topic].append(msg)
        return msg

    def _check(self, msgs, now):
        for m in msgs:
            if m.available_time > now:
                raise CausalityError(f"{m.topic.value} seq {m.seq} read at {now} before {m.available_time}")
        return msgs

    def latest(self, topic: Topic, now: float) -> Optional[Message]:
        ready = [m for m in self._queues[topic] if m.available_time <= now]
        if not ready:
            return None
        best = max(ready, key=lambda m: (m.publish_time, m.seq))
        return self._check([best], now)[0]

    def available(self, topic: Topic, now: float, after_seq: int = 0,
                  published_by: Optional[float] = None) -> List[Message]:
        out = [m for m in self._queues[topic] if m.available_time <= now and m.seq > after_seq
               and (published_by is None or m.publish_time <= published_by)]
        return self._check(out, now)

    def all(self, topic: Topic) -> List[Message]:
        return list(self._queues[topic])


class RunMode(enum.Enum):
    FULL = "full"
    RT_ONLY = "rt_only"
    MESO_OPEN_LOOP = "meso_open_loop"
    CONSTANT = "constant"


@dataclass
class LoopConfig:
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    meso: MesoConfig = field(default_factory=MesoConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    horizon: float = 3600.0
    sensor_cells: Sequence[int] = tuple(range(2, 50, 5))
    noise_std: float = 0.01
    delta_ok: float = 0.05
    feedback_radius: float = 1.0
    discrepancy_window: int = 10

    def __post_init__(self):
        # the tiers share one clock; keep the derived settings consistent with it
        self.meso.t2 = self.latency.t2
        self.tracking.dt = self.latency.t1
        self.tracking.cost_per_qp_iter = self.latency.rt_cost_per_qp_iter


@dataclass
class RunLog:
    decisions: List[tuple] = field(default_factory=list)
    plans: List[tuple] = field(default_factory=list)
    true_cost: float = 0.0
    events: List[tuple] = field(default_factory=list)
    seed: int = 0
    mode: str = RunMode.FULL.value
    failed: bool = False
    catalog_version: int = 0

    def mode_counts(self) -> Dict[str, int]:
        c = Counter(d.mode.value for _, d in self.decisions)
        return {m.value: c.get(m.value, 0) for m in Mode}

    def decisions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "mode", "control", "qp_iters", "plan_id", "est_err"])
        for t, d in self.decisions:
            w.writerow([_fmt(t), d.mode.value, _fmt(d.control), d.qp_iterations,
                        "" if d.plan_id is None else d.plan_id, _fmt(d.est_err)])
        return buf.getvalue()

    def plans_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "plan_id", "predicted_cost"])
        for t, pid, cost in self.plans:
            w.writerow([_fmt(t), pid, _fmt(cost)])
        return buf.getvalue()

    def header(self) -> dict:
        return {"seed": self.seed, "mode": self.mode, "true_cost": _fmt(self.true_cost), "failed": self.failed,
                "n_decisions": len(self.decisions), "n_plans": len(self.plans),
                "catalog_version": self.catalog_version,
                "events": [[_fmt(t), e] for t, e in self.events]}

    def dumps(self) -> str:
        return (json.dumps(self.header()) + "\n# decisions\n" + self.decisions_csv()
                + "# plans\n" + self.plans_csv())


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _ticks(horizon: float, t1: float) -> int:
    return int(math.floor(horizon / t1 + 1e-9))


def _advance_true(state: PlantState, duration: float, u: float, truth: ScenarioParams, params: PlantParams):
    """Advance the true plant, splitting at inflow switch times."""
    t_end = state.t + duration
    cuts = [t for t in truth.segment_breakpoints() if state.t < t < t_end] + [t_end]
    cur = state
    for b in cuts:
        mid = 0.5 * (cur.t + b)
        cur = advance(cur, b - cur.t, u, truth.inflow_at(mid), params)
        if isinstance(cur, FailureReport):
            return cur
    return cur


def catalog_plan(catalog: Catalog, features: np.ndarray, params: PlantParams, state: PlantState,
                 forecast: ScenarioParams, meso_cfg: MesoConfig, horizon: float,
                 valid_until: Optional[float] = None) -> Optional[ReferencePlan]:
    """Offline-derived plan from the nearest catalog entry whose control simulates on the forecast.

    Entries are tried in k-NN order, finite objectives first; ``None`` when none of them works.
    """
    ranked = query_nearest(catalog, features, len(catalog))
    ranked = [e for e in ranked if np.isfinite(e.objective)] + [e for e in ranked if not np.isfinite(e.objective)]
    cfg = replace(meso_cfg, horizon=horizon)
    seg = forecast.horizon / forecast.n_segments if forecast.horizon > 0 else horizon
    sc = forecast.window(state.t, horizon, max(1, int(round(horizon / seg))))
    for entry in ranked:
        x = resample_controls(entry.control_params, 0.0, catalog.horizon or horizon, 0.0, horizon, cfg.intervals)
        particle = Particle(np.clip(x, 0.0, forecast.u_max), catalog_id=entry.id)
        try:
            return assemble_plan(particle, params, state, sc, cfg, plan_id=0, created_at=state.t,
                                 valid_until=valid_until)
        except PlanSimFailed:
            continue
    return None


def best_constant_control(params: PlantParams, state: PlantState, forecast: ScenarioParams, horizon: float,
                          start: float, n_grid: int = 21, dt_out: float = 60.0) -> float:
    """Lowest predicted-cost constant outflow on a grid over [0, u_max] plus the catalog match ``start``."""
    candidates = sorted(set(np.linspace(0.0, forecast.u_max, n_grid).tolist() + [float(np.clip(start, 0.0, forecast.u_max))]))
    best, best_cost = candidates[0], math.inf
    for u in candidates:
        res = simulate(state, ControlTrajectory(np.array([u]), state.t, horizon), forecast, params, dt_out)
        if isinstance(res, FailureReport):
            continue
        if res.cost < best_cost:
            best, best_cost = u, res.cost
    return best


def run_closed_loop(cfg: LoopConfig, params: PlantParams, scenario_truth: ScenarioParams, catalog: Catalog,
                    seed: int, mode: RunMode = RunMode.FULL, forecast: Optional[ScenarioParams] = None) -> RunLog:
    """Simulated-time run of the three tiers against the true plant.

    ``forecast`` is what the tiers believe about the exogenous series (defaults to
    the truth); the plant itself always evolves under ``scenario_truth``.
    """
    mode = RunMode(mode)
    status, msg = validate_latency(cfg.latency)
    if status is LatencyStatus.ERROR:
        raise ValueError(msg)
    forecast = forecast or scenario_truth
    lat = cfg.latency
    t1, t2 = lat.t1, lat.t2
    n_ticks = _ticks(cfg.horizon, t1)
    sensor_rng, meso_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    log = RunLog(seed=seed, mode=mode.value, catalog_version=catalog.version)
    bus = MessageBus()
    state = still_water(params, scenario_truth.h_init, 0.0)
    cells = list(cfg.sensor_cells)

    # offline tier, strictly before t = 0
    feats = scenario_features(forecast.window(0.0, cfg.meso.horizon))
    feats[4] = float(np.mean(state.h))
    static = mode is RunMode.RT_ONLY
    plan_horizon = max(cfg.horizon + t2, cfg.meso.horizon) if static else cfg.meso.horizon
    valid = cfg.horizon + t1 if static else None
    initial = catalog_plan(catalog, feats, params, state, forecast, cfg.meso, plan_horizon, valid)
    current_seq = 0
    if initial is not None:
        current_seq = bus.publish(Topic.PLAN, initial.to_text(), 0.0, 0.0).seq
        log.plans.append((0.0, initial.plan_id, initial.predicted_cost))
        log.events.append((0.0, f"OFFLINE_PLAN {initial.plan_id}"))
        start_u = float(np.mean(initial.control_traj.values))
    else:
        log.events.append((0.0, "NO_OFFLINE_PLAN"))
        start_u = 0.0
    constant_u = best_constant_control(params, state, forecast, cfg.horizon, start_u)

    meso = None
    if mode in (RunMode.FULL, RunMode.MESO_OPEN_LOOP):
        meso = MesoLayer(params, forecast, cells, cfg.meso, state, meso_rng)
    rt = RealtimeLayer(params, forecast, cells, cfg.tracking)

    current_plan = initial
    feedback_seq = 0
    sensor_seq = 0
    sensor_history: List[Observation] = []
    applied: List[tuple] = []
    meso_plan_for_mining: Optional[ReferencePlan] = initial
    mine_from = 0.0

    for i in range(n_ticks):
        t = i * t1
        # offline feedback applier: fold in discrepancy records that have arrived
        for m in bus.available(Topic.DISCREPANCY, t, after_seq=feedback_seq):
            feedback_seq = m.seq
            records = [DiscrepancyRecord.from_dict(d) for d in json.loads(m.payload)]
            if records:
                catalog = ingest_feedback(catalog, records, cfg.feedback_radius)
                bus.publish(Topic.CATALOG_UPDATE, json.dumps({"version": catalog.version}), t, t)

        # real-time tier
        obs = observe(state, cells, cfg.noise_std, sensor_rng)
        latest = bus.latest(Topic.PLAN, t)
        if latest is not None and latest.seq != current_seq:
            current_plan = ReferencePlan.from_text(latest.payload)
            current_seq = latest.seq
            log.events.append((t, f"ADOPT_PLAN {current_plan.plan_id}"))
        if mode is RunMode.CONSTANT:
            rt.window.push(obs)
            decision = RtDecision(constant_u, 0, 0.0, Mode.FALLBACK_HOLD, None)
        elif mode is RunMode.MESO_OPEN_LOOP:
            rt.window.push(obs)
            if current_plan is None:
                decision = RtDecision(rt.last_control, 0, 0.0, Mode.FALLBACK_HOLD, None)
            else:
                u = float(np.clip(current_plan.control_at(t), 0.0, scenario_truth.u_max))
                decision = RtDecision(u, 0, 0.0, Mode.FALLBACK_REFERENCE, current_plan.plan_id)
        else:
            decision = rt.step(obs, current_plan, t)
        log.decisions.append((t, decision))
        applied.append((t, decision.control))
        bus.publish(Topic.SENSOR, json.dumps({"obs": obs.to_dict(), "control": decision.control}), t, t)

        # meso tier
        if meso is not None and i % _ticks(t2, t1) == 0:
            msgs = bus.available(Topic.SENSOR, t, after_seq=sensor_seq, published_by=t)
            if msgs:
                sensor_seq = msgs[-1].seq
            for m in msgs:
                body = json.loads(m.payload)
                sensor_history.append(Observation.from_dict(body["obs"]))
            try:
                plan = meso.cycle(t, catalog, sensor_history, applied)
            except MesoError as exc:
                log.events.append((t, f"MESO_FAILED {exc.code}"))
                plan = None
            window_obs = [o for o in sensor_history if mine_from <= o.t <= t]
            records = []
            if meso_plan_for_mining is not None:
                records = mine_discrepancies(meso_plan_for_mining, window_obs, cfg.delta_ok,
                                             cfg.discrepancy_window, meso.features(t))
            if plan is not None:
                ready = t + lat.meso_compute
                bus.publish(Topic.PLAN, plan.to_text(), t, ready)
                log.plans.append((ready, plan.plan_id, plan.predicted_cost))
                meso_plan_for_mining = plan
            bus.publish(Topic.DISCREPANCY, json.dumps([r.to_dict() for r in records]), t, t + lat.meso_compute)
            mine_from = t
            sensor_history = sensor_history[-max(cfg.tracking.window, 3):]

        # true plant over [t, t + t1)
        log.true_cost += stage_cost(state, decision.control, scenario_truth.price_at(t + 0.5 * t1), scenario_truth) * t1
        nxt = _advance_true(state, t1, decision.control, scenario_truth, params)
        if isinstance(nxt, FailureReport):
            log.events.append((nxt.t_fail, f"PLANT_FAILURE {nxt.kind.value}"))
            log.failed = True
            break
        state = nxt
    log.catalog_version = catalog.version
    return log


def compare_baselines(cfg: LoopConfig, params: PlantParams, scenario_truth: ScenarioParams, catalog: Catalog,
                      seeds: Sequence[int], forecast: Optional[ScenarioParams] = None,
                      modes: Sequence[RunMode] = tuple(RunMode)) -> Dict[str, Any]:
    """Run every configuration on identical plant, scenario and seed; aggregate per configuration."""
    if not seeds:
        raise ValueError("at least one seed is required")
    runs = []
    for seed in seeds:
        for mode in modes:
            log = run_closed_loop(cfg, params, scenario_truth, catalog, seed, mode, forecast)
            runs.append({"seed": int(seed), "config": RunMode(mode).value, "true_cost": log.true_cost,
                         "failed": log.failed, "modes": log.mode_counts()})
    summary = {}
    for mode in modes:
        mine = [r for r in runs if r["config"] == RunMode(mode).value]
        counts = Counter()
        for r in mine:
            counts.update(r["modes"])
        summary[RunMode(mode).value] = {
            "mean_true_cost": float(np.mean([r["true_cost"] for r in mine])),
            "failures": sum(r["failed"] for r in mine),
            "mode_counts": dict(counts),
        }
    return {"seeds": [int(s) for s in seeds], "runs": runs, "summary": summary}
