"""Offline layer: scenario sampling, multistart catalog builds, regularity labels and k-NN queries."""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .plant import ControlTrajectory, FailureReport, PlantParams, PlantState, ScenarioParams, simulate, still_water
from .solvers import InfeasibleStartError, NlpStatus, SqpSettings, solve_nlp_sqp

FEATURE_NAMES = ("mean_inflow", "inflow_amplitude", "mean_price", "price_amplitude", "initial_depth")
FAILED_OBJECTIVE = math.inf


class CatalogError(Exception):
    code = "CATALOG_ERROR"


class EmptyBuildError(CatalogError):
    code = "EMPTY_BUILD"


class EmptyCatalogError(CatalogError):
    code = "EMPTY_CATALOG"


class CorruptCatalogError(CatalogError):
    code = "CORRUPT_CATALOG"

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Label(enum.Enum):
    SMOOTH = "SMOOTH"
    ROUGH = "ROUGH"
    FAILED = "FAILED"


@dataclass
class CatalogEntry:
    id: int
    scenario_features: np.ndarray
    control_params: np.ndarray
    objective: float
    label: Label
    sensitivity: float
    beta_a: float = 1.0
    beta_b: float = 1.0

    def __post_init__(self):
        self.scenario_features = np.asarray(self.scenario_features, dtype=float)
        self.control_params = np.asarray(self.control_params, dtype=float)
        self.label = Label(self.label)
        if not np.all(np.isfinite(self.scenario_features)):
            raise ValueError("features must be finite")
        if self.beta_a < 1 or self.beta_b < 1:
            raise ValueError("Beta pseudo-counts must be >= 1")
        if self.label is Label.FAILED:
            self.objective = FAILED_OBJECTIVE

    def __eq__(self, other):
        if not isinstance(other, CatalogEntry):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and np.array_equal(self.scenario_features, other.scenario_features)
                and np.array_equal(self.control_params, other.control_params)
                and _same_float(self.objective, other.objective)
                and _same_float(self.sensitivity, other.sensitivity)
                and self.beta_a == other.beta_a and self.beta_b == other.beta_b)


def _same_float(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass
class Catalog:
    entries: List[CatalogEntry]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    version: int = 0
    build_seed: int = 0
    horizon: float = 0.0

    def __post_init__(self):
        self.feature_mean = np.asarray(self.feature_mean, dtype=float)
        self.feature_std = np.asarray(self.feature_std, dtype=float)
        if np.any(self.feature_std <= 0):
            raise ValueError("feature scaling std must be positive")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("catalog ids must be unique")

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, Catalog):
            return NotImplemented
        return (self.entries == other.entries and self.version == other.version
                and self.build_seed == other.build_seed and self.horizon == other.horizon
                and np.array_equal(self.feature_mean, other.feature_mean)
                and np.array_equal(self.feature_std, other.feature_std))

    def scale(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_std

    def by_id(self, entry_id: int) -> CatalogEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)


@dataclass
class RegularityVerdict:
    success_prob: float
    neighbor_ids: List[int]
    mean_sensitivity: float


@dataclass
class CatalogSettings:
    """Knobs for the offline build; defaults match the closed-loop configuration."""

    intervals: int = 6
    starts_per_scenario: int = 2
    sqp_budget: int = 8
    probes: int = 3
    eps: float = 1e-2
    sigma_thresh: float = 1e3
    dt_out: float = 60.0
    sqp: SqpSettings = field(default_factory=lambda: SqpSettings(grad_step=1e-4, tol_stationarity=1e-6))


# ---------------------------------------------------------------------------
# scenarios


def scenario_features(scenario: ScenarioParams) -> np.ndarray:
    inflow, price = scenario.inflow_series, scenario.price_series
    return np.array([
        inflow.mean(), 0.5 * (inflow.max() - inflow.min()),
        price.mean(), 0.5 * (price.max() - price.min()),
        scenario.h_init,
    ])


def make_scenario(features: Sequence[float], base: ScenarioParams) -> ScenarioParams:
    """Sinusoidal inflow and an off-peak/peak price cycle over the base horizon."""
    mean_q, amp_q, mean_p, amp_p, h0 = (float(f) for f in features)
    k = base.n_segments
    phase = 2 * np.pi * (np.arange(k) + 0.5) / k
    inflow = np.maximum(mean_q + amp_q * np.sin(phase), 0.0)
    price = mean_p - amp_p * np.cos(phase)
    return ScenarioParams(inflow, price, base.u_max, base.level_bounds, base.horizon, base.t0, h0)


def sample_scenarios(n: int, rng: np.random.Generator, ranges: Sequence[Tuple[float, float]],
                     base: ScenarioParams) -> List[ScenarioParams]:
    """Latin hypercube over the feature ranges (one sample per stratum per dimension)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranges = np.asarray(ranges, dtype=float)
    if ranges.shape != (len(FEATURE_NAMES), 2) or np.any(ranges[:, 0] >= ranges[:, 1]):
        raise ValueError("ranges must be 5 (lo, hi) pairs with lo < hi")
    d = ranges.shape[0]
    u = np.empty((n, d))
    for j in range(d):
        strata = rng.permutation(n)
        u[:, j] = (strata + rng.uniform(size=n)) / n
    pts = ranges[:, 0] + u * (ranges[:, 1] - ranges[:, 0])
    return [make_scenario(p, base) for p in pts]


# ---------------------------------------------------------------------------
# regularity


def classify_regularity(params: PlantParams, scenario: ScenarioParams, state0: PlantState,
                        control: ControlTrajectory, probes: int, eps: float, rng: np.random.Generator,
                        sigma_thresh: float = 1e3, dt_out: float = 60.0) -> Tuple[Label, float]:
    """Label a control by simulation success and finite-difference sensitivity.

    Sensitivity is the worst ratio of relative final-state change to relative
    control change over ``probes`` random perturbations of relative size ``eps``.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    nominal = simulate(state0, control, scenario, params, dt_out)
    if isinstance(nominal, FailureReport):
        return Label.FAILED, math.inf
    x_nom = nominal.final_state.vector()
    u_nom = control.values
    x_scale = max(np.linalg.norm(x_nom), 1e-12)
    u_scale = np.linalg.norm(u_nom) if np.linalg.norm(u_nom) > 0 else scenario.u_max

    sens = 0.0
    rough = False
    for _ in range(probes):
        d = rng.normal(size=u_nom.size)
        d *= eps * u_scale / np.linalg.norm(d)
        u_p = np.clip(u_nom + d, 0.0, scenario.u_max)
        du = np.linalg.norm(u_p - u_nom)
        if du == 0:
            u_p = np.clip(u_nom - d, 0.0, scenario.u_max)
            du = np.linalg.norm(u_p - u_nom)
        pert = simulate(state0, replace(control, values=u_p), scenario, params, dt_out)
        if isinstance(pert, FailureReport):
            rough = True
            continue
        dx = np.linalg.norm(pert.final_state.vector() - x_nom)
        sens = max(sens, (dx / x_scale) / (du / u_scale))
    if rough or sens > sigma_thresh:
        return Label.ROUGH, sens
    return Label.SMOOTH, sens


# ---------------------------------------------------------------------------
# build


@dataclass
class _ScenarioResult:
    control: np.ndarray
    objective: float
    label: Label
    sensitivity: float
    successes: int
    failures: int


def _build_one(params: PlantParams, scenario: ScenarioParams, settings: CatalogSettings,
               m: int, seed_seq: np.random.SeedSequence) -> _ScenarioResult:
    from .meso import transcribe

    rng = np.random.default_rng(seed_seq)
    state0 = still_water(params, scenario.h_init, scenario.t0)
    problem = transcribe(scenario, state0, scenario.horizon, settings.intervals, params, settings.dt_out)
    candidates = []
    successes = failures = 0
    for _ in range(m):
        x0 = rng.uniform(problem.lower, problem.upper)
        try:
            sol = solve_nlp_sqp(problem, x0, settings.sqp, settings.sqp_budget)
        except InfeasibleStartError:
            failures += 1
            candidates.append((Label.FAILED, FAILED_OBJECTIVE, math.inf, x0))
            continue
        ctrl = ControlTrajectory(sol.x, scenario.t0, scenario.horizon)
        label, sens = classify_regularity(params, scenario, state0, ctrl, settings.probes, settings.eps,
                                          rng, settings.sigma_thresh, settings.dt_out)
        if sol.status is NlpStatus.ROUGH_REGION and label is Label.SMOOTH:
            label = Label.ROUGH
        if label is Label.SMOOTH:
            successes += 1
        else:
            failures += 1
        candidates.append((label, sol.cost if label is not Label.FAILED else FAILED_OBJECTIVE, sens, sol.x))

    for wanted in (Label.SMOOTH, Label.ROUGH):
        pool = [c for c in candidates if c[0] is wanted]
        if pool:
            best = min(pool, key=lambda c: c[1])
            return _ScenarioResult(best[3], best[1], wanted, best[2], successes, failures)
    return _ScenarioResult(candidates[0][3], FAILED_OBJECTIVE, Label.FAILED, math.inf, successes, failures)


def build_catalog(params: PlantParams, scenarios: Sequence[ScenarioParams], starts_per_scenario: int,
                  settings: Optional[CatalogSettings] = None, seed: int = 0, workers: int = 1) -> Catalog:
    """Multistart SQP over every scenario; results merge in scenario order whatever ``workers`` is."""
    if not scenarios:
        raise EmptyBuildError("no scenarios to build from")
    if starts_per_scenario < 1:
        raise ValueError("starts_per_scenario must be >= 1")
    settings = settings or CatalogSettings()
    seqs = np.random.SeedSequence(seed).spawn(len(scenarios))
    jobs = list(zip(scenarios, seqs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_build_one, params, sc, settings, starts_per_scenario, sq) for sc, sq in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_build_one(params, sc, settings, starts_per_scenario, sq) for sc, sq in jobs]

    feats = np.array([scenario_features(sc) for sc in scenarios])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std <= 0] = 1.0
    entries = [
        CatalogEntry(i, feats[i], res.control, res.objective, res.label, res.sensitivity,
                     1.0 + res.successes, 1.0 + res.failures)
        for i, res in enumerate(results)
    ]
    return Catalog(entries, mean, std, version=0, build_seed=seed, horizon=float(scenarios[0].horizon))


# ---------------------------------------------------------------------------
# queries


def scaled_distances(catalog: Catalog, features) -> np.ndarray:
    q = catalog.scale(features)
    return np.array([np.linalg.norm(catalog.scale(e.scenario_features) - q) for e in catalog.entries])


def query_nearest(catalog: Catalog, features, k: int = 1) -> List[CatalogEntry]:
    if not catalog.entries:
        raise EmptyCatalogError("catalog has no entries")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = scaled_distances(catalog, features)
    order = sorted(range(len(catalog.entries)), key=lambda i: (dist[i], catalog.entries[i].id))
    return [catalog.entries[i] for i in order[:k]]


def wellbehaved_prob(catalog: Catalog, features, k: int = 1) -> RegularityVerdict:
    """Pooled Beta-Bernoulli posterior mean over the k nearest entries."""
    near = query_nearest(catalog, features, k)
    a = sum(e.beta_a for e in near)
    b = sum(e.beta_b for e in near)
    sens = [e.sensitivity for e in near if e.label is not Label.FAILED]
    return RegularityVerdict(a / (a + b), [e.id for e in near], float(np.mean(sens)) if sens else math.inf)


def ingest_feedback(catalog: Catalog, records: Sequence, radius: float) -> Catalog:
    """Bump Beta counts of entries within ``radius`` (scaled distance) of each record."""
    if not records:
        return catalog
    a = {e.id: e.beta_a for e in catalog.entries}
    b = {e.id: e.beta_b for e in catalog.entries}
    for rec in records:
        dist = scaled_distances(catalog, rec.features)
        for e, d in zip(catalog.entries, dist):
            if d <= radius:
                if rec.ok:
                    a[e.id] += 1.0
                else:
                    b[e.id] += 1.0
    entries = [replace(e, beta_a=a[e.id], beta_b=b[e.id]) for e in catalog.entries]
    return replace(catalog, entries=entries, version=catalog.version + 1)


# ---------------------------------------------------------------------------
# persistence


def _num(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _vec(v) -> str:
    return "[" + ", ".join(_num(x) for x in v) + "]"


def dumps_catalog(catalog: Catalog) -> str:
    lines = [
        '{"version": %d, "build_seed": %d, "horizon": %s, "n_entries": %d, '
        '"feature_scaling": {"mean": %s, "std": %s}}'
        % (catalog.version, catalog.build_seed, _num(catalog.horizon), len(catalog.entries),
           _vec(catalog.feature_mean), _vec(catalog.feature_std))
    ]
    for e in catalog.entries:
        lines.append(
            '{"id": %d, "features": %s, "control": %s, "objective": %s, "label": "%s", '
            '"sensitivity": %s, "beta_a": %s, "beta_b": %s}'
            % (e.id, _vec(e.scenario_features), _vec(e.control_params), _num(e.objective),
               e.label.value, _num(e.sensitivity), _num(e.beta_a), _num(e.beta_b))
        )
    return "\n".join(lines) + "\n"


def loads_catalog(text: str) -> Catalog:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorruptCatalogError("empty file", 1)
    try:
        head = json.loads(lines[0])
        version = int(head["version"])
        scaling = head["feature_scaling"]
        mean, std = scaling["mean"], scaling["std"]
        n_entries = int(head["n_entries"])
        build_seed = int(head.get("build_seed", 0))
        horizon = float(head.get("horizon", 0.0))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCatalogError(f"bad header ({exc})", 1) from None
    entries = []
    for no, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            entries.append(CatalogEntry(int(d["id"]), d["features"], d["control"], float(d["objective"]),
                                        Label(d["label"]), float(d["sensitivity"]),
                                        float(d["beta_a"]), float(d["beta_b"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptCatalogError(f"bad entry ({exc})", no) from None
    if len(entries) != n_entries:
        raise CorruptCatalogError(f"expected {n_entries} entries, found {len(entries)}", len(lines) + 1)
    try:
        return Catalog(entries, mean, std, version, build_seed, horizon)
    except ValueError as exc:
        raise CorruptCatalogError(str(exc), 1) from None


def save_catalog(catalog: Catalog, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_catalog(catalog))


def load_catalog(path) -> Catalog:
    with open(path) as fh:
        return loads_catalog(fh.read())
