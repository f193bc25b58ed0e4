"""Meso layer: transcription, the particle pool, POD plan assembly and discrepancy mining."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .catalog import Catalog, Label, query_nearest, scenario_features
from .mor import PodBasis, SnapshotMatrix, compute_pod, lift, project
from .plant import (
    ControlTrajectory, FailureReport, Observation, PlantParams, PlantState, ScenarioParams, Trajectory,
    advance, simulate,
)
from .solvers import InfeasibleStartError, NlpProblem, NlpStatus, SqpSettings, solve_nlp_sqp

FAILURE_COST = 1e12


class MesoError(Exception):
    code = "MESO_ERROR"


class NoCandidatesError(MesoError):
    code = "NO_CANDIDATES"


class PlanSimFailed(MesoError):
    code = "PLAN_SIM_FAILED"


class Origin(enum.Enum):
    CATALOG = "CATALOG"
    MUTATION = "MUTATION"
    SURVIVOR = "SURVIVOR"


@dataclass
class MesoConfig:
    pool_size: int = 8
    intervals: int = 12
    sqp_budget: int = 5
    energy_target: float = 0.99
    sigma_mut: float = 0.1
    v_tol: float = 0.05
    horizon: float = 3600.0
    dt_out: float = 60.0
    t2: float = 600.0
    validity_margin: float = 600.0
    sqp: SqpSettings = field(default_factory=lambda: SqpSettings(grad_step=1e-4, tol_stationarity=1e-6))


@dataclass
class Particle:
    control_params: np.ndarray
    objective_pred: float = math.inf
    violation: float = math.inf
    age: int = 0
    origin: Origin = Origin.CATALOG
    t0: float = 0.0
    catalog_id: Optional[int] = None

    def same_as(self, other: "Particle") -> bool:
        return (np.array_equal(self.control_params, other.control_params)
                and self.objective_pred == other.objective_pred and self.violation == other.violation
                and self.age == other.age and self.origin == other.origin and self.t0 == other.t0
                and self.catalog_id == other.catalog_id)


@dataclass
class ParticlePool:
    particles: List[Particle] = field(default_factory=list)
    capacity: int = 8
    cycle: int = 0

    def __len__(self):
        return len(self.particles)


@dataclass
class ReferencePlan:
    plan_id: int
    basis: PodBasis
    times: np.ndarray
    reduced_traj: np.ndarray
    control_traj: ControlTrajectory
    created_at: float
    valid_until: float
    predicted_cost: float
    infeasible: bool = False

    def __post_init__(self):
        if not self.valid_until > self.created_at:
            raise ValueError("valid_until must exceed created_at")

    def reference_at(self, t: float) -> np.ndarray:
        """Reduced reference state, linearly interpolated between output snapshots."""
        t = min(max(t, self.times[0]), self.times[-1])
        return np.array([np.interp(t, self.times, row) for row in self.reduced_traj])

    def control_at(self, t: float) -> float:
        return self.control_traj.at(t)

    def to_text(self) -> str:
        b = self.basis
        head = {
            "plan_id": self.plan_id, "created_at": self.created_at, "valid_until": self.valid_until,
            "r": b.r, "M": self.control_traj.n_intervals, "predicted_cost": self.predicted_cost,
            "dim": b.dim, "K": int(self.times.size), "t0": self.control_traj.t0,
            "duration": self.control_traj.duration, "energy_fraction": b.energy_fraction,
            "degenerate": b.degenerate, "infeasible": self.infeasible,
        }
        rows = [
            json.dumps(head, sort_keys=False),
            _row(b.mean_state), _row(b.modes.ravel()), _row(b.singular_values),
            _row(self.times), _row(self.reduced_traj.ravel()), _row(self.control_traj.values),
        ]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ReferencePlan":
        lines = text.strip("\n").split("\n")
        h = json.loads(lines[0])
        mean, modes, sv, times, red, ctrl = (_parse_row(s) for s in lines[1:7])
        r, dim, K = h["r"], h["dim"], h["K"]
        basis = PodBasis(modes.reshape(dim, r), sv, h["energy_fraction"], mean, h["degenerate"])
        return cls(h["plan_id"], basis, times, red.reshape(r, K),
                   ControlTrajectory(ctrl, h["t0"], h["duration"]),
                   h["created_at"], h["valid_until"], h["predicted_cost"], h["infeasible"])


def _row(v) -> str:
    return " ".join(format(float(x), ".17g") for x in np.ravel(v))


def _parse_row(s: str) -> np.ndarray:
    return np.array([float(x) for x in s.split()]) if s.strip() else np.zeros(0)


@dataclass
class DiscrepancyRecord:
    features: np.ndarray
    pred_err: float
    ok: bool
    t: float

    def to_dict(self) -> dict:
        return {"features": [float(f) for f in self.features], "pred_err": self.pred_err,
                "ok": self.ok, "t": self.t}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscrepancyRecord":
        return cls(np.asarray(d["features"], dtype=float), float(d["pred_err"]), bool(d["ok"]), float(d["t"]))


# ---------------------------------------------------------------------------


def transcribe(scenario_estimate: ScenarioParams, state: PlantState, horizon: float, intervals: int,
               params: PlantParams, dt_out: float = 60.0) -> NlpProblem:
    """Piecewise-constant outflow on ``intervals`` equal pieces of [state.t, state.t + horizon]."""
    if intervals < 1:
        raise ValueError("intervals must be >= 1")
    t0 = state.t

    def objective(x):
        if horizon <= 0:
            return 0.0, False
        res = simulate(state, ControlTrajectory(x, t0, horizon), scenario_estimate, params, dt_out)
        if isinstance(res, FailureReport):
            return FAILURE_COST, True
        return res.cost, False

    u_max = scenario_estimate.u_max
    return NlpProblem(intervals, objective, np.zeros(intervals), np.full(intervals, u_max), True)


def level_violation(traj: Trajectory, scenario: ScenarioParams) -> float:
    """Largest excursion (m) of any snapshot depth outside the level band."""
    h_lo, h_hi = scenario.level_bounds
    return float(max(np.max(h_lo - traj.h, initial=0.0), np.max(traj.h - h_hi, initial=0.0), 0.0))


def resample_controls(values: np.ndarray, t0_old: float, duration_old: float, t0_new: float,
                      duration_new: float, m_new: int) -> np.ndarray:
    """Sample an old piecewise-constant control at the new interval midpoints (held at the ends)."""
    old = ControlTrajectory(values, t0_old, duration_old)
    mids = t0_new + duration_new / m_new * (np.arange(m_new) + 0.5)
    return np.array([old.at(t) for t in mids])


def _evaluate(particle: Particle, state: PlantState, scenario: ScenarioParams, params: PlantParams,
              cfg: MesoConfig) -> Particle:
    res = simulate(state, ControlTrajectory(particle.control_params, state.t, cfg.horizon), scenario,
                   params, cfg.dt_out)
    if isinstance(res, FailureReport):
        particle.objective_pred, particle.violation = math.inf, math.inf
    else:
        particle.objective_pred, particle.violation = res.cost, level_violation(res, scenario)
    return particle


def _fence_outliers(objectives: Sequence[float]) -> List[bool]:
    """Leave-one-out fence: flag x_i > median + 3 IQR of the other particles."""
    obj = np.asarray(objectives, dtype=float)
    flags = []
    for i in range(obj.size):
        others = np.delete(obj, i)
        if others.size < 2:
            flags.append(False)
            continue
        med = float(np.median(others))
        q1, q3 = np.percentile(others, [25, 75])
        iqr = max(float(q3 - q1), 1e-9 * (1.0 + abs(med)))
        flags.append(bool(obj[i] > med + 3.0 * iqr))
    return flags


def select_best(particles: Sequence[Particle], v_tol: float) -> Tuple[int, bool]:
    """Index of the lowest-objective feasible particle; falls back to minimum violation."""
    feas = [i for i, p in enumerate(particles) if p.violation <= v_tol and np.isfinite(p.objective_pred)]
    if feas:
        return min(feas, key=lambda i: (particles[i].objective_pred, i)), False
    return min(range(len(particles)), key=lambda i: (particles[i].violation, particles[i].objective_pred, i)), True


def meso_cycle(pool: ParticlePool, catalog: Optional[Catalog], state_estimate: PlantState,
               scenario_estimate: ScenarioParams, params: PlantParams, cfg: MesoConfig,
               rng: np.random.Generator, created_at: Optional[float] = None):
    """One refine / drop / replenish / select pass. Returns ``(new_pool, plan)``."""
    has_catalog = catalog is not None and len(catalog) > 0
    if not pool.particles and not has_catalog:
        raise NoCandidatesError("particle pool and catalog are both empty")
    t_now = state_estimate.t
    created_at = t_now if created_at is None else created_at
    m = cfg.intervals
    problem = transcribe(scenario_estimate, state_estimate, cfg.horizon, m, params, cfg.dt_out)

    # 1-2. shift to the current window, refine, re-evaluate
    refined: List[Particle] = []
    rough: List[bool] = []
    for p in pool.particles:
        x = p.control_params
        if p.t0 != t_now or x.size != m:
            x = resample_controls(x, p.t0, cfg.horizon, t_now, cfg.horizon, m)
        q = Particle(x, age=p.age + 1, origin=Origin.SURVIVOR, t0=t_now, catalog_id=p.catalog_id)
        status = None
        try:
            sol = solve_nlp_sqp(problem, x, cfg.sqp, cfg.sqp_budget)
            q.control_params, status = sol.x, sol.status
        except InfeasibleStartError:
            status = NlpStatus.ROUGH_REGION
        _evaluate(q, state_estimate, scenario_estimate, params, cfg)
        refined.append(q)
        rough.append(status is NlpStatus.ROUGH_REGION or not np.isfinite(q.objective_pred))

    # 3. drop
    fence = _fence_outliers([q.objective_pred if np.isfinite(q.objective_pred) else FAILURE_COST
                             for q in refined]) if len(refined) >= 3 else [False] * len(refined)
    keep = [q for q, r, f in zip(refined, rough, fence) if not r and not f and q.violation <= cfg.v_tol]

    # 4. replenish, alternating catalog entries and mutations of the best particle
    features = scenario_features(scenario_estimate)
    features[4] = float(np.mean(state_estimate.h))
    queue: List[Particle] = []
    if has_catalog:
        present = {q.catalog_id for q in keep if q.catalog_id is not None}
        for e in query_nearest(catalog, features, len(catalog)):
            if e.label is Label.FAILED or e.id in present:
                continue
            x = resample_controls(e.control_params, 0.0, catalog.horizon or cfg.horizon, 0.0, cfg.horizon, m)
            queue.append(Particle(np.clip(x, 0.0, scenario_estimate.u_max), origin=Origin.CATALOG,
                                  t0=t_now, catalog_id=e.id))

    new_pool = list(keep)
    use_catalog = True
    attempts = 0
    while len(new_pool) < pool.capacity and attempts < 4 * pool.capacity:
        attempts += 1
        ref = new_pool or refined
        if use_catalog and queue:
            cand = queue.pop(0)
        elif ref:
            base = ref[select_best(ref, cfg.v_tol)[0]] if ref else None
            noise = rng.normal(0.0, cfg.sigma_mut * scenario_estimate.u_max, size=m)
            cand = Particle(np.clip(base.control_params + noise, 0.0, scenario_estimate.u_max),
                            origin=Origin.MUTATION, t0=t_now)
        elif queue:
            cand = queue.pop(0)
        else:
            break
        use_catalog = not use_catalog
        _evaluate(cand, state_estimate, scenario_estimate, params, cfg)
        if np.isfinite(cand.objective_pred):
            new_pool.append(cand)

    if not new_pool:
        # nothing usable survived or could be generated: keep the least-bad refined particle
        finite = [q for q in refined if np.isfinite(q.objective_pred)]
        if not finite:
            raise NoCandidatesError("no candidate produced a finite simulation")
        new_pool = [finite[select_best(finite, cfg.v_tol)[0]]]

    # 5. select and hand off
    idx, infeasible = select_best(new_pool, cfg.v_tol)
    out_pool = ParticlePool(new_pool, pool.capacity, pool.cycle + 1)
    plan = assemble_plan(new_pool[idx], params, state_estimate, scenario_estimate, cfg,
                         plan_id=out_pool.cycle, created_at=created_at)
    plan.infeasible = infeasible
    return out_pool, plan


def assemble_plan(best: Particle, params: PlantParams, state_estimate: PlantState,
                  scenario_estimate: ScenarioParams, cfg: MesoConfig, plan_id: int = 0,
                  created_at: Optional[float] = None, valid_until: Optional[float] = None) -> ReferencePlan:
    """Simulate the chosen control, compress the snapshots with POD and package the plan."""
    t_now = state_estimate.t
    created_at = t_now if created_at is None else created_at
    ctrl = ControlTrajectory(np.array(best.control_params, dtype=float), t_now, cfg.horizon)
    traj = simulate(state_estimate, ctrl, scenario_estimate, params, cfg.dt_out)
    if isinstance(traj, FailureReport):
        raise PlanSimFailed(f"plan simulation failed: {traj.kind.value} at t={traj.t_fail}")
    X = traj.snapshot_matrix()
    basis = compute_pod(SnapshotMatrix(X, traj.times), cfg.energy_target)
    reduced = project(basis, X)
    if valid_until is None:
        valid_until = min(created_at + cfg.t2 + cfg.validity_margin, t_now + cfg.horizon)
    valid_until = max(valid_until, created_at + 1e-6)
    return ReferencePlan(plan_id, basis, traj.times.copy(), reduced, ctrl, created_at, valid_until, traj.cost,
                         level_violation(traj, scenario_estimate) > cfg.v_tol)


def predicted_sensors(plan: ReferencePlan, t: float, cells: Sequence[int]) -> np.ndarray:
    full = lift(plan.basis, plan.reference_at(t))
    return full[list(cells)]


def mine_discrepancies(plan: ReferencePlan, sensor_buffer: Sequence[Observation], delta_ok: float,
                       window: int = 10, features: Optional[np.ndarray] = None) -> List[DiscrepancyRecord]:
    """RMS sensor mismatch against the plan over consecutive windows of ``window`` observations."""
    if not sensor_buffer:
        return []
    if features is None:
        features = np.zeros(5)
    records = []
    obs = sorted(sensor_buffer, key=lambda o: o.t)
    for start in range(0, len(obs), window):
        chunk = obs[start:start + window]
        sq = 0.0
        count = 0
        for o in chunk:
            r = o.values - predicted_sensors(plan, o.t, o.cells)
            sq += float(r @ r)
            count += r.size
        err = math.sqrt(sq / count)
        records.append(DiscrepancyRecord(np.array(features, dtype=float), err, err <= delta_ok, chunk[-1].t))
    return records


def interpolate_depths(cells: Sequence[int], values: np.ndarray, n_cells: int) -> np.ndarray:
    """Piecewise-linear depth profile through the sensor readings (flat beyond the end sensors)."""
    return np.interp(np.arange(n_cells), np.asarray(cells, dtype=float), values)


class MesoLayer:
    """The time-embedded meso task: re-anchors its estimates to sensors and runs ``meso_cycle``.

    The state estimate is the layer's own model prediction under the applied
    controls with depths replaced by the sensor interpolation. The inflow forecast
    is shifted by an offset that integrates the volume mismatch between that
    prediction and the sensors.
    """

    def __init__(self, params: PlantParams, forecast: ScenarioParams, sensor_cells: Sequence[int],
                 cfg: MesoConfig, state0: PlantState, rng: np.random.Generator, n_average: int = 3):
        self.params = params
        self.forecast = forecast
        self.sensor_cells = list(sensor_cells)
        self.cfg = cfg
        self.rng = rng
        self.n_average = n_average
        self.pool = ParticlePool(capacity=cfg.pool_size)
        self.state_est = state0.copy()
        self.inflow_offset = 0.0
        self.last_plan: Optional[ReferencePlan] = None
        self.last_applied = 0.0

    def scenario_estimate(self, t: float) -> ScenarioParams:
        seg = self.forecast.horizon / self.forecast.n_segments if self.forecast.horizon > 0 else self.cfg.horizon
        n = max(1, int(round(self.cfg.horizon / seg)))
        return self.forecast.window(t, self.cfg.horizon, n, self.inflow_offset)

    def update_estimate(self, t: float, observations: Sequence[Observation],
                        applied: Sequence[Tuple[float, float]]) -> PlantState:
        """Advance the model to ``t`` under ``applied`` = [(tick time, control)], then re-anchor."""
        state = self.state_est
        t_start = state.t
        ticks = sorted(a for a in applied if t_start <= a[0] < t)
        edges = [tk for tk, _ in ticks] + [t]
        u = self.last_applied
        if ticks and ticks[0][0] > t_start:
            state = self._advance(state, ticks[0][0] - t_start, u)
        for (tk, u), t_next in zip(ticks, edges[1:]):
            state = self._advance(state, t_next - tk, u)
        if not ticks:
            state = self._advance(state, t - t_start, u)
        self.last_applied = u

        recent = [o for o in observations if o.t <= t][-self.n_average:]
        if recent:
            y = np.mean([o.values for o in recent], axis=0)
            h_obs = interpolate_depths(self.sensor_cells, y, self.params.n_cells)
            h_pred = interpolate_depths(self.sensor_cells, state.h[self.sensor_cells], self.params.n_cells)
            elapsed = t - t_start
            if elapsed > 0:
                self.inflow_offset += (h_obs.sum() - h_pred.sum()) * self.params.dx / elapsed
            state = PlantState(np.maximum(h_obs, 2 * self.params.h_min), state.hu.copy(), t)
        self.state_est = state
        return state

    def _advance(self, state: PlantState, duration: float, u: float) -> PlantState:
        if duration <= 0:
            return state
        mid = state.t + 0.5 * duration
        inflow = max(self.forecast.inflow_at(mid) + self.inflow_offset, 0.0)
        res = advance(state, duration, u, inflow, self.params)
        if isinstance(res, FailureReport):
            # a failed prediction keeps the old depths; the sensors re-anchor them afterwards
            return PlantState(state.h.copy(), state.hu.copy(), state.t + duration)
        return res

    def cycle(self, t: float, catalog: Optional[Catalog], observations: Sequence[Observation],
              applied: Sequence[Tuple[float, float]]) -> ReferencePlan:
        state = self.update_estimate(t, observations, applied)
        scenario = self.scenario_estimate(t)
        self.pool, plan = meso_cycle(self.pool, catalog, state, scenario, self.params, self.cfg, self.rng,
                                     created_at=t)
        self.last_plan = plan
        return plan

    def features(self, t: float) -> np.ndarray:
        f = scenario_features(self.scenario_estimate(t))
        f[4] = float(np.mean(self.state_est.h))
        return f
