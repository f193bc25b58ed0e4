"""Reference plants: a 1D Saint-Venant finite-volume channel and a scalar reservoir ODE.

The channel is a flat-bed reach of unit width. Water enters through the left
boundary (exogenous inflow) and leaves through a turbine at the right boundary
(the control). Discharges are therefore quoted per unit width, so m^3/s and
m^2/s coincide.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

EFFICIENCY = 0.9
LEVEL_PENALTY = 1.0e3
DT_COLLAPSE_LIMIT = 1e-9


@dataclass(frozen=True)
class PlantParams:
    n_cells: int = 50
    domain_length: float = 10_000.0
    gravity: float = 9.81
    cfl_number: float = 0.45
    h_min: float = 0.05
    friction_coeff: float = 0.0

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError("n_cells must be >= 2")
        if not self.domain_length > 0:
            raise ValueError("domain_length must be positive")
        if not 0 < self.cfl_number <= 1:
            raise ValueError("cfl_number must lie in (0, 1]")
        if not self.h_min > 0:
            raise ValueError("h_min must be positive")
        if self.friction_coeff < 0:
            raise ValueError("friction_coeff must be >= 0")

    @property
    def dx(self) -> float:
        return self.domain_length / self.n_cells


@dataclass
class PlantState:
    h: np.ndarray
    hu: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.hu = np.asarray(self.hu, dtype=float)
        if self.h.shape != self.hu.shape or self.h.ndim != 1:
            raise ValueError("h and hu must be 1D arrays of equal length")

    @property
    def n_cells(self) -> int:
        return self.h.size

    def vector(self) -> np.ndarray:
        """Stacked [h; hu] vector used by the reduced-order machinery."""
        return np.concatenate([self.h, self.hu])

    @classmethod
    def from_vector(cls, v: np.ndarray, t: float = 0.0) -> "PlantState":
        v = np.asarray(v, dtype=float)
        n = v.size // 2
        return cls(v[:n].copy(), v[n:].copy(), t)

    def copy(self) -> "PlantState":
        return PlantState(self.h.copy(), self.hu.copy(), self.t)

    def total_volume(self, params: PlantParams) -> float:
        return float(np.sum(self.h) * params.dx)


def still_water(params: PlantParams, depth: float, t: float = 0.0) -> PlantState:
    return PlantState(np.full(params.n_cells, float(depth)), np.zeros(params.n_cells), t)


@dataclass(frozen=True)
class ControlInput:
    outflow: float

    def __post_init__(self):
        if not self.outflow >= 0:
            raise ValueError("outflow must be non-negative")


@dataclass
class ControlTrajectory:
    """Piecewise-constant outflow on ``len(values)`` equal intervals of [t0, t0 + duration]."""

    values: np.ndarray
    t0: float = 0.0
    duration: float = 0.0

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if self.values.size < 1:
            raise ValueError("a control trajectory needs at least one interval")

    @property
    def n_intervals(self) -> int:
        return self.values.size

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    @property
    def interval(self) -> float:
        return self.duration / self.values.size

    def breakpoints(self) -> np.ndarray:
        return self.t0 + self.interval * np.arange(self.values.size + 1)

    def at(self, t: float) -> float:
        if self.duration <= 0:
            return float(self.values[0])
        k = int(math.floor((t - self.t0) / self.interval + 1e-9))
        return float(self.values[min(max(k, 0), self.values.size - 1)])


@dataclass
class ScenarioParams:
    """Exogenous data over [t0, t0 + horizon]: piecewise-constant inflow and price series."""

    inflow_series: np.ndarray
    price_series: np.ndarray
    u_max: float
    level_bounds: tuple
    horizon: float
    t0: float = 0.0
    h_init: float = 2.0

    def __post_init__(self):
        self.inflow_series = np.atleast_1d(np.asarray(self.inflow_series, dtype=float))
        self.price_series = np.atleast_1d(np.asarray(self.price_series, dtype=float))
        self.level_bounds = (float(self.level_bounds[0]), float(self.level_bounds[1]))
        if self.inflow_series.size != self.price_series.size:
            raise ValueError("inflow and price series must have equal length")
        if not self.level_bounds[0] < self.level_bounds[1]:
            raise ValueError("level_bounds must satisfy h_lo < h_hi")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")

    @property
    def n_segments(self) -> int:
        return self.inflow_series.size

    def _segment(self, t: float) -> int:
        if self.horizon <= 0:
            return 0
        k = int(math.floor((t - self.t0) / (self.horizon / self.n_segments) + 1e-9))
        return min(max(k, 0), self.n_segments - 1)

    def inflow_at(self, t: float) -> float:
        return float(self.inflow_series[self._segment(t)])

    def price_at(self, t: float) -> float:
        return float(self.price_series[self._segment(t)])

    def segment_breakpoints(self) -> np.ndarray:
        return self.t0 + self.horizon / self.n_segments * np.arange(self.n_segments + 1)

    def window(self, t_start: float, duration: float, n_segments: Optional[int] = None,
               inflow_offset: float = 0.0) -> "ScenarioParams":
        """Resample the series on [t_start, t_start + duration] (held constant past the end)."""
        n = n_segments or self.n_segments
        seg = duration / n if duration > 0 else 0.0
        mids = t_start + seg * (np.arange(n) + 0.5)
        inflow = np.array([self.inflow_at(t) for t in mids]) + inflow_offset
        price = np.array([self.price_at(t) for t in mids])
        return ScenarioParams(np.maximum(inflow, 0.0), price, self.u_max, self.level_bounds,
                              duration, t_start, self.h_init)


class FailureKind(enum.Enum):
    NON_FINITE = "NON_FINITE"
    DRY_STATE = "DRY_STATE"
    DT_COLLAPSE = "DT_COLLAPSE"


@dataclass(frozen=True)
class FailureReport:
    kind: FailureKind
    t_fail: float
    cell: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind.value, "t_fail": self.t_fail, "cell": self.cell})

    @classmethod
    def from_json(cls, text: str) -> "FailureReport":
        d = json.loads(text)
        return cls(FailureKind(d["kind"]), float(d["t_fail"]), d.get("cell"))


def _physical_flux(h, hu, g):
    u = hu / h
    return hu, hu * u + 0.5 * g * h * h


def max_wave_speed(state: PlantState, params: PlantParams) -> float:
    return float(np.max(np.abs(state.hu / state.h) + np.sqrt(params.gravity * state.h)))


def _check(h, hu, t, h_min) -> Optional[FailureReport]:
    bad = ~(np.isfinite(h) & np.isfinite(hu))
    if bad.any():
        return FailureReport(FailureKind.NON_FINITE, t, int(np.argmax(bad)))
    if h.min() < h_min:
        return FailureReport(FailureKind.DRY_STATE, t, int(np.argmin(h)))
    return None


def step(state: PlantState, control: Union[ControlInput, float], inflow: float, dt_max: float,
         params: PlantParams) -> Union[PlantState, FailureReport]:
    """Advance one first-order Rusanov finite-volume step.

    Boundary discharges enter through mirrored ghost cells (ghost depth equals the
    boundary cell depth, ghost discharge ``2q - hu``), which makes the mass flux
    through each boundary exactly ``q``. The turbine outflow is clipped so that it
    never removes more water than the outlet cell holds in one step.
    """
    if not dt_max > 0:
        raise ValueError("dt_max must be positive")
    outflow = control.outflow if isinstance(control, ControlInput) else float(control)
    g = params.gravity
    dx = params.dx
    h, hu = state.h, state.hu

    early = _check(h, hu, state.t, params.h_min)
    if early is not None:
        return early

    speed = np.abs(hu / h) + np.sqrt(g * h)
    a_max = float(speed.max())
    dt = min(dt_max, params.cfl_number * dx / a_max)
    if dt < DT_COLLAPSE_LIMIT:
        return FailureReport(FailureKind.DT_COLLAPSE, state.t)

    q_in = max(float(inflow), 0.0)
    q_out = min(max(outflow, 0.0), h[-1] * dx / dt)

    he = np.empty(h.size + 2)
    hue = np.empty(h.size + 2)
    he[1:-1] = h
    hue[1:-1] = hu
    he[0], hue[0] = h[0], 2.0 * q_in - hu[0]
    he[-1], hue[-1] = h[-1], 2.0 * q_out - hu[-1]

    f1, f2 = _physical_flux(he, hue, g)
    se = np.abs(hue / he) + np.sqrt(g * he)
    a = np.maximum(se[:-1], se[1:])
    F1 = 0.5 * (f1[:-1] + f1[1:]) - 0.5 * a * (he[1:] - he[:-1])
    F2 = 0.5 * (f2[:-1] + f2[1:]) - 0.5 * a * (hue[1:] - hue[:-1])

    lam = dt / dx
    h_new = h - lam * (F1[1:] - F1[:-1])
    hu_new = hu - lam * (F2[1:] - F2[:-1])
    if params.friction_coeff > 0:
        # semi-implicit quadratic drag keeps the update unconditionally stable
        hs = np.maximum(h_new, params.h_min)
        hu_new = hu_new / (1.0 + dt * params.friction_coeff * np.abs(hu_new) / (hs * hs))

    t_new = state.t + dt
    fail = _check(h_new, hu_new, t_new, params.h_min)
    if fail is not None:
        return fail
    return PlantState(h_new, hu_new, t_new)


def stage_cost(state: PlantState, control: Union[ControlInput, float], price: float,
               scenario: ScenarioParams) -> float:
    """Negative turbine revenue plus a quadratic penalty on depths outside the level band."""
    u = control.outflow if isinstance(control, ControlInput) else float(control)
    h_lo, h_hi = scenario.level_bounds
    h = state.h
    revenue = price * EFFICIENCY * u * float(h[-1])
    below = np.maximum(0.0, h_lo - h)
    above = np.maximum(0.0, h - h_hi)
    return -revenue + LEVEL_PENALTY * float(np.sum(below * below) + np.sum(above * above))


@dataclass
class Trajectory:
    """Snapshots at a fixed output cadence plus the accumulated cost.

    Cost is a left-point rectangle rule on the output grid: interval ``k`` contributes
    ``stage_cost(snapshot k, controls[k], prices[k]) * (times[k+1] - times[k])``.
    """

    times: np.ndarray
    h: np.ndarray
    hu: np.ndarray
    controls: np.ndarray
    prices: np.ndarray
    cost: float

    @property
    def n_snapshots(self) -> int:
        return self.times.size

    def state(self, k: int) -> PlantState:
        return PlantState(self.h[k].copy(), self.hu[k].copy(), float(self.times[k]))

    @property
    def final_state(self) -> PlantState:
        return self.state(self.times.size - 1)

    def snapshot_matrix(self) -> np.ndarray:
        """Columns are stacked [h; hu] snapshots."""
        return np.hstack([self.h, self.hu]).T

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cell", "h", "hu"])
            for k, t in enumerate(self.times):
                for i in range(self.h.shape[1]):
                    w.writerow([repr(float(t)), i, repr(float(self.h[k, i])), repr(float(self.hu[k, i]))])


def advance(state: PlantState, duration: float, control: float, inflow: float,
            params: PlantParams) -> Union[PlantState, FailureReport]:
    """Run ``step`` until exactly ``duration`` seconds have elapsed."""
    t_end = state.t + duration
    cur = state
    while t_end - cur.t > 1e-9 * max(1.0, abs(t_end)):
        nxt = step(cur, control, inflow, t_end - cur.t, params)
        if isinstance(nxt, FailureReport):
            return nxt
        cur = nxt
    cur.t = t_end
    return cur


def simulate(state0: PlantState, controls: ControlTrajectory, scenario: ScenarioParams,
             params: PlantParams, dt_out: float = 60.0) -> Union[Trajectory, FailureReport]:
    """Integrate the channel over the control horizon, recording snapshots every ``dt_out``."""
    if not dt_out > 0:
        raise ValueError("dt_out must be positive")
    t0 = state0.t
    t_end = t0 + controls.duration
    n_out = int(math.ceil(controls.duration / dt_out - 1e-9)) if controls.duration > 0 else 0
    out_times = np.minimum(t0 + dt_out * np.arange(n_out + 1), t_end)

    # every control/series switch becomes a hard stop for the integrator
    stops = set(out_times.tolist())
    stops.update(t for t in controls.breakpoints() if t0 < t < t_end)
    stops.update(t for t in scenario.segment_breakpoints() if t0 < t < t_end)
    stops = sorted(stops)

    hs = [state0.h.copy()]
    hus = [state0.hu.copy()]
    us, ps = [], []
    cost = 0.0
    cur = state0
    nxt_out = 1
    for a, b in zip(stops[:-1], stops[1:]):
        if b - a <= 0:
            continue
        mid = 0.5 * (a + b)
        res = advance(cur, b - a, controls.at(mid), scenario.inflow_at(mid), params)
        if isinstance(res, FailureReport):
            return res
        cur = res
        if nxt_out <= n_out and abs(b - out_times[nxt_out]) <= 1e-9 * max(1.0, abs(b)):
            hs.append(cur.h.copy())
            hus.append(cur.hu.copy())
            nxt_out += 1

    snap_state = state0
    for k in range(n_out):
        tk = float(out_times[k])
        mid = 0.5 * (out_times[k] + out_times[k + 1])
        u = controls.at(mid)
        p = scenario.price_at(mid)
        if k > 0:
            snap_state = PlantState(hs[k], hus[k], tk)
        us.append(u)
        ps.append(p)
        cost += stage_cost(snap_state, u, p, scenario) * float(out_times[k + 1] - out_times[k])

    return Trajectory(out_times, np.array(hs), np.array(hus), np.array(us), np.array(ps), cost)


@dataclass(frozen=True)
class Observation:
    t: float
    cells: tuple
    values: np.ndarray = field(compare=False)

    def __eq__(self, other):
        return (isinstance(other, Observation) and self.t == other.t and self.cells == other.cells
                and np.array_equal(self.values, other.values))

    def to_dict(self) -> dict:
        return {"t": self.t, "cells": list(self.cells), "values": [float(v) for v in self.values]}

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(float(d["t"]), tuple(int(c) for c in d["cells"]), np.asarray(d["values"], dtype=float))


def observe(state: PlantState, sensor_cells: Sequence[int], noise_std: float,
            rng: np.random.Generator) -> Observation:
    cells = tuple(int(c) for c in sensor_cells)
    n = state.n_cells
    for c in cells:
        if not 0 <= c < n:
            raise IndexError(f"sensor cell {c} outside [0, {n})")
    values = state.h[list(cells)].copy()
    if noise_std > 0:
        values = values + rng.normal(0.0, noise_std, size=len(cells))
    return Observation(float(state.t), cells, values)


def toy_step(volume: float, control: Union[ControlInput, float], inflow: float, dt: float,
             c: float = 1.0) -> float:
    """Explicit Euler step of V' = inflow - c*u*sqrt(V), clamped at zero."""
    u = control.outflow if isinstance(control, ControlInput) else float(control)
    v = volume + dt * (inflow - c * u * math.sqrt(max(volume, 0.0)))
    return max(v, 0.0)
