"""Real-time layer: windowed reduced-state estimation and warm-started tracking QPs."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .meso import ReferencePlan
from .mor import lift, project
from .plant import FailureReport, Observation, PlantParams, PlantState, ScenarioParams, advance
from .solvers import BoxQp, QpSolution, SolverError, solve_box_qp

REGULARIZATION = 1e-8


class PlanExpired(Exception):
    code = "PLAN_EXPIRED"


class Mode(enum.Enum):
    TRACKED = "TRACKED"
    FALLBACK_REFERENCE = "FALLBACK_REFERENCE"
    FALLBACK_HOLD = "FALLBACK_HOLD"


@dataclass
class TrackingConfig:
    horizon_steps: int = 10
    q_weight: float = 1.0
    r_weight: float = 1.0
    u_max: float = 3.0
    deadline: float = 1.0
    dt: float = 30.0
    cost_per_qp_iter: float = 0.01
    forgetting: float = 0.9
    window: int = 10
    prior_weight: float = 0.0

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if not self.deadline > 0:
            raise ValueError("deadline must be positive")
        if not (self.q_weight > 0 and self.r_weight > 0):
            raise ValueError("weights must be positive")


@dataclass
class RtDecision:
    control: float
    qp_iterations: int
    solve_time: float
    mode: Mode
    plan_id: Optional[int] = None
    est_err: float = float("nan")


class EstimatorWindow:
    """Ring buffer of the last ``size`` observations with strictly increasing timestamps."""

    def __init__(self, size: int = 10):
        if size < 1:
            raise ValueError("window size must be >= 1")
        self.size = size
        self._obs: deque = deque(maxlen=size)

    def push(self, obs: Observation) -> None:
        if self._obs and obs.t <= self._obs[-1].t:
            raise ValueError("observation timestamps must be strictly increasing")
        self._obs.append(obs)

    def __len__(self):
        return len(self._obs)

    def __iter__(self):
        return iter(self._obs)

    @property
    def latest(self) -> Observation:
        return self._obs[-1]


def estimate_reduced_state(window: EstimatorWindow, plan: ReferencePlan, sensor_cells: Sequence[int],
                           t_now: Optional[float] = None, forgetting: float = 0.9, tick: float = 1.0,
                           prior_weight: float = 0.0) -> np.ndarray:
    """Weighted least-squares fit of a reduced state and its drift over the window.

    Observation ``j`` contributes ``forgetting ** ((t_now - t_j) / tick)`` times its
    squared residual against the lifted linear-in-time reduced state. Windows
    shorter than three observations fall back to fitting the latest observation
    alone. ``prior_weight`` adds an arrival cost ``prior_weight * |z - z_ref|^2``
    per unit of total observation weight; depth sensors barely see momentum-heavy
    modes, and without it the fit chases basis truncation error.
    """
    if len(window) == 0:
        raise ValueError("estimator window is empty")
    obs = list(window)
    t_now = obs[-1].t if t_now is None else t_now
    basis = plan.basis
    cells = list(sensor_cells)
    S_phi = basis.modes[cells, :]
    S_mean = basis.mean_state[cells]
    r = basis.r
    prior = plan.reference_at(t_now)

    if len(obs) < 3:
        rows, rhs, w = [S_phi], [obs[-1].values - S_mean], [np.ones(len(cells))]
        n_var = r
    else:
        rows, rhs, w = [], [], []
        for o in obs:
            tau = o.t - t_now
            rows.append(np.hstack([S_phi, tau * S_phi]))
            rhs.append(o.values - S_mean)
            w.append(np.full(len(cells), forgetting ** ((t_now - o.t) / tick)))
        n_var = 2 * r
        prior = np.concatenate([prior, np.zeros(r)])
    sw = np.sqrt(np.concatenate(w))
    A = np.vstack(rows) * sw[:, None]
    b = np.concatenate(rhs) * sw
    if prior_weight > 0:
        root = np.sqrt(prior_weight * float(np.sum(sw ** 2)) / len(cells))
        A = np.vstack([A, root * np.eye(r, n_var)])
        b = np.concatenate([b, root * prior[:r]])
    if np.linalg.matrix_rank(A) < n_var:
        # unobservable directions stay at the plan reference
        root = np.sqrt(REGULARIZATION * max(1.0, float(np.sum(A * A)) / n_var))
        A = np.vstack([A, root * np.eye(n_var)])
        b = np.concatenate([b, root * prior])
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    return sol[:r]


class LtvModel:
    """Reduced linearisation ``dz' = A_k dz + B_k du`` along a plan, cached per tick time.

    ``A_k`` and ``B_k`` come from central differences of project . advance . lift
    around the plan's reduced reference and control at each tick.
    """

    def __init__(self, plan: ReferencePlan, params: PlantParams, scenario: ScenarioParams, dt: float,
                 rel_step: float = 1e-3):
        self.plan = plan
        self.params = params
        self.scenario = scenario
        self.dt = dt
        self.rel_step = rel_step
        self._cache: Dict[float, Tuple[np.ndarray, np.ndarray]] = {}

    def _reduced_step(self, z: np.ndarray, u: float, t: float) -> np.ndarray:
        basis = self.plan.basis
        full = lift(basis, z)
        n = full.size // 2
        h = np.maximum(full[:n], 2 * self.params.h_min)
        res = advance(PlantState(h, full[n:].copy(), t), self.dt, max(u, 0.0), self.scenario.inflow_at(t),
                      self.params)
        if isinstance(res, FailureReport):
            raise SolverError(f"reduced step failed: {res.kind.value}")
        return project(basis, res.vector())

    def matrices(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        key = round(t, 6)
        if key not in self._cache:
            z = self.plan.reference_at(t)
            u = self.plan.control_at(t)
            r = z.size
            A = np.zeros((r, r))
            for i in range(r):
                h = self.rel_step * max(1.0, abs(z[i]))
                e = np.zeros(r)
                e[i] = h
                A[:, i] = (self._reduced_step(z + e, u, t) - self._reduced_step(z - e, u, t)) / (2 * h)
            du = self.rel_step * max(1.0, abs(u))
            B = (self._reduced_step(z, u + du, t) - self._reduced_step(z, u - du, t)) / (2 * du)
            self._cache[key] = (A, B.reshape(r, 1))
        return self._cache[key]


@dataclass
class TrackingQp:
    qp: BoxQp
    u_ref: np.ndarray


def build_tracking_qp(plan: ReferencePlan, z_now: np.ndarray, t_now: float, cfg: TrackingConfig,
                      model) -> TrackingQp:
    """Condensed QP over control deviations on ``cfg.horizon_steps`` ticks.

    ``model.matrices(t)`` supplies ``(A_k, B_k)`` at each tick time.
    """
    if t_now >= plan.valid_until:
        raise PlanExpired(f"plan {plan.plan_id} expired at {plan.valid_until}")
    N = cfg.horizon_steps
    r = plan.basis.r
    ts = [t_now + k * cfg.dt for k in range(N)]
    mats = [model.matrices(t) for t in ts]
    dz0 = np.asarray(z_now, dtype=float) - plan.reference_at(t_now)

    # dz_k = Phi_k dz0 + sum_j G[k, j] du_j for k = 1..N
    Phi = np.zeros((N, r, r))
    G = np.zeros((N, r, N))
    P = np.eye(r)
    for k in range(N):
        A, B = mats[k]
        P = A @ P
        Phi[k] = P
        if k > 0:
            G[k, :, :k] = A @ G[k - 1, :, :k]
        G[k, :, k] = B[:, 0]
    Gm = G.reshape(N * r, N)
    free = Phi.reshape(N * r, r) @ dz0
    H = 2.0 * (cfg.q_weight * Gm.T @ Gm + cfg.r_weight * np.eye(N))
    g = 2.0 * cfg.q_weight * Gm.T @ free
    H = 0.5 * (H + H.T) + REGULARIZATION * np.eye(N)
    u_ref = np.array([plan.control_at(t) for t in ts])
    return TrackingQp(BoxQp(H, g, 0.0 - u_ref, cfg.u_max - u_ref), u_ref)


class RealtimeLayer:
    """Stateful wrapper around ``rt_step`` that owns the window, warm start and plan cache."""

    def __init__(self, params: PlantParams, scenario: ScenarioParams, sensor_cells: Sequence[int],
                 cfg: TrackingConfig):
        self.params = params
        self.scenario = scenario
        self.sensor_cells = list(sensor_cells)
        self.cfg = cfg
        self.window = EstimatorWindow(cfg.window)
        self.warm: Optional[QpSolution] = None
        self.last_control = 0.0
        self._model: Optional[LtvModel] = None

    def model_for(self, plan: ReferencePlan) -> LtvModel:
        if self._model is None or self._model.plan is not plan:
            self._model = LtvModel(plan, self.params, self.scenario, self.cfg.dt)
            self.warm = None
        return self._model

    def step(self, obs: Observation, plan: Optional[ReferencePlan], t_now: float,
             use_warm: bool = True) -> RtDecision:
        self.window.push(obs)
        model = self.model_for(plan) if plan is not None else None
        decision, sol = rt_step(plan, self.window, self.warm if use_warm else None, self.cfg, t_now,
                                self.sensor_cells, model, self.last_control)
        self.warm = sol
        self.last_control = decision.control
        return decision


def rt_step(plan: Optional[ReferencePlan], window: EstimatorWindow, warm: Optional[QpSolution],
            cfg: TrackingConfig, t_now: float, sensor_cells: Sequence[int], model=None,
            last_control: float = 0.0) -> Tuple[RtDecision, Optional[QpSolution]]:
    """Estimate, build and solve the tracking QP; any failure maps to a fallback mode.

    Returns the decision and the QP solution already shifted for the next tick.
    """
    if plan is None:
        u = float(np.clip(last_control, 0.0, cfg.u_max))
        return RtDecision(u, 0, 0.0, Mode.FALLBACK_HOLD), None
    u_ref_now = float(np.clip(plan.control_at(t_now), 0.0, cfg.u_max))
    if t_now >= plan.valid_until or model is None or len(window) == 0:
        return RtDecision(u_ref_now, 0, 0.0, Mode.FALLBACK_REFERENCE, plan.plan_id), None
    try:
        z = estimate_reduced_state(window, plan, sensor_cells, t_now, cfg.forgetting, cfg.dt, cfg.prior_weight)
        est_err = float(np.linalg.norm(z - plan.reference_at(t_now)))
        tq = build_tracking_qp(plan, z, t_now, cfg, model)
        sol = solve_box_qp(tq.qp, warm)
    except (SolverError, PlanExpired, np.linalg.LinAlgError):
        return RtDecision(u_ref_now, 0, 0.0, Mode.FALLBACK_REFERENCE, plan.plan_id), None
    solve_time = sol.iterations * cfg.cost_per_qp_iter
    if solve_time > cfg.deadline:
        return RtDecision(u_ref_now, sol.iterations, solve_time, Mode.FALLBACK_REFERENCE, plan.plan_id,
                          est_err), None
    u = float(np.clip(tq.u_ref[0] + sol.x[0], 0.0, cfg.u_max))
    return RtDecision(u, sol.iterations, solve_time, Mode.TRACKED, plan.plan_id, est_err), sol.shifted()
