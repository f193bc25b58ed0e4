import json

import numpy as np
import pytest

from tritier.catalog import CatalogSettings, build_catalog, sample_scenarios
from tritier.meso import MesoConfig
from tritier.orchestrator import (
    CausalityError, LatencyConfig, LatencyStatus, LoopConfig, MessageBus, RunMode, Topic, compare_baselines,
    run_closed_loop, validate_latency,
)
from tritier.plant import ControlTrajectory, PlantParams, ScenarioParams, simulate, still_water
from tritier.realtime import Mode, TrackingConfig

SMALL = PlantParams(n_cells=10, domain_length=2000.0)
RANGES = [(0.5, 1.5), (0.0, 0.5), (30.0, 70.0), (0.0, 20.0), (1.8, 2.2)]


def scenario(horizon=600.0, step=0.0):
    inflow = np.full(4, 1.0)
    inflow[2:] += step
    return ScenarioParams(inflow, np.array([40.0, 60.0, 60.0, 40.0]), 3.0, (1.0, 3.0), horizon)


@pytest.fixture(scope="module")
def catalog():
    scen = sample_scenarios(3, np.random.default_rng(2), RANGES, scenario())
    return build_catalog(SMALL, scen, 1, CatalogSettings(intervals=3, sqp_budget=2, probes=1), seed=0)


def loop(t1=30.0, t2=300.0, meso_compute=45.0, horizon=600.0, **kw):
    meso = MesoConfig(pool_size=2, intervals=3, sqp_budget=1, horizon=horizon, validity_margin=t2)
    return LoopConfig(latency=LatencyConfig(t1=t1, t2=t2, meso_compute=meso_compute), meso=meso,
                      tracking=TrackingConfig(horizon_steps=4, prior_weight=0.1), horizon=horizon,
                      sensor_cells=(1, 4, 8), **kw)


class TestLatency:
    def test_separated_ok(self):
        assert validate_latency(LatencyConfig(t1=10.0, t2=600.0, meso_compute=45.0))[0] is LatencyStatus.OK

    def test_inverted_error(self):
        assert validate_latency(LatencyConfig(t1=600.0, t2=10.0, meso_compute=5.0))[0] is LatencyStatus.ERROR

    def test_equal_error(self):
        assert validate_latency(LatencyConfig(t1=60.0, t2=60.0, meso_compute=5.0))[0] is LatencyStatus.ERROR

    def test_narrow_ratio_warning(self):
        assert validate_latency(LatencyConfig(t1=10.0, t2=50.0, meso_compute=5.0))[0] is LatencyStatus.WARNING

    def test_wide_ratio_warning(self):
        assert validate_latency(LatencyConfig(t1=1.0, t2=500.0, meso_compute=5.0))[0] is LatencyStatus.WARNING

    def test_meso_compute_beyond_t2(self):
        assert validate_latency(LatencyConfig(t1=10.0, t2=600.0, meso_compute=700.0))[0] is LatencyStatus.ERROR

    def test_run_rejects_error(self, catalog):
        with pytest.raises(ValueError):
            run_closed_loop(loop(t1=600.0, t2=30.0, meso_compute=10.0), SMALL, scenario(), catalog, 0)


class TestBus:
    def test_seq_per_topic(self):
        bus = MessageBus()
        a = bus.publish(Topic.PLAN, "a", 0.0)
        b = bus.publish(Topic.SENSOR, "b", 0.0)
        c = bus.publish(Topic.PLAN, "c", 1.0)
        assert (a.seq, b.seq, c.seq) == (1, 1, 2)

    def test_latest_respects_availability(self):
        bus = MessageBus()
        bus.publish(Topic.PLAN, "old", 0.0, 0.0)
        bus.publish(Topic.PLAN, "new", 60.0, 105.0)
        assert bus.latest(Topic.PLAN, 90.0).payload == "old"
        assert bus.latest(Topic.PLAN, 105.0).payload == "new"
        assert bus.latest(Topic.DISCREPANCY, 1e9) is None

    def test_available_filters(self):
        bus = MessageBus()
        for t in (0.0, 30.0, 60.0):
            bus.publish(Topic.SENSOR, str(t), t)
        got = bus.available(Topic.SENSOR, 60.0, after_seq=1, published_by=30.0)
        assert [m.payload for m in got] == ["30.0"]

    def test_causality_assert(self):
        bus = MessageBus()
        m = bus.publish(Topic.PLAN, "x", 0.0, 50.0)
        with pytest.raises(CausalityError):
            bus._check([m], 10.0)

    def test_available_before_publish_rejected(self):
        with pytest.raises(ValueError):
            MessageBus().publish(Topic.PLAN, "x", 10.0, 5.0)


class TestClosedLoop:
    def test_tick_count_without_meso(self, catalog):
        cfg = loop(t1=30.0, t2=900.0, meso_compute=45.0, horizon=300.0)
        log = run_closed_loop(cfg, SMALL, scenario(300.0), catalog, 0, RunMode.RT_ONLY)
        assert len(log.decisions) == 10
        assert all(d.plan_id == 0 or d.mode is not Mode.TRACKED for _, d in log.decisions)
        assert [t for t, _ in log.decisions] == [30.0 * k for k in range(10)]

    def test_plan_availability_rule(self, catalog):
        cfg = loop(t1=15.0, t2=60.0, meso_compute=45.0, horizon=180.0)
        log = run_closed_loop(cfg, SMALL, scenario(180.0), catalog, 0)
        ids = {t: d.plan_id for t, d in log.decisions}
        # cycle at t = 60 publishes plan 2, available at 105
        assert ids[90.0] == 1 and ids[105.0] == 2
        assert (105.0, "ADOPT_PLAN 2") in log.events

    def test_deterministic_serialization(self, catalog):
        a = run_closed_loop(loop(), SMALL, scenario(step=0.5), catalog, 3).dumps()
        b = run_closed_loop(loop(), SMALL, scenario(step=0.5), catalog, 3).dumps()
        assert a == b
        head = json.loads(a.splitlines()[0])
        assert head["n_decisions"] == 20 and head["seed"] == 3

    def test_decisions_csv_shape(self, catalog):
        log = run_closed_loop(loop(), SMALL, scenario(), catalog, 1)
        rows = log.decisions_csv().splitlines()
        assert rows[0] == "t,mode,control,qp_iters,plan_id,est_err"
        assert len(rows) == 1 + 20
        assert all(0.0 <= d.control <= 3.0 for _, d in log.decisions)

    def test_feedback_updates_catalog(self, catalog):
        log = run_closed_loop(loop(), SMALL, scenario(step=0.5), catalog, 0)
        assert log.catalog_version > catalog.version
        assert catalog.version == 0

    def test_constant_equals_direct_simulation(self, catalog):
        cfg = loop()
        truth = scenario(step=0.5)
        log = run_closed_loop(cfg, SMALL, truth, catalog, 0, RunMode.CONSTANT)
        u = log.decisions[0][1].control
        assert all(d.control == u for _, d in log.decisions)
        direct = simulate(still_water(SMALL, truth.h_init), ControlTrajectory(np.array([u]), 0.0, 600.0), truth,
                          SMALL, dt_out=cfg.latency.t1)
        assert log.true_cost == pytest.approx(direct.cost, rel=1e-12)

    def test_plant_failure_logged(self, catalog):
        forecast = ScenarioParams(np.full(4, 3.0), np.full(4, 50.0), 3.0, (0.06, 3.0), 600.0, h_init=0.3)
        truth = ScenarioParams(np.zeros(4), np.full(4, 50.0), 3.0, (0.06, 3.0), 600.0, h_init=0.3)
        log = run_closed_loop(loop(), SMALL, truth, catalog, 0, RunMode.CONSTANT, forecast)
        assert log.failed
        assert any("PLANT_FAILURE" in e for _, e in log.events)
        assert len(log.decisions) < 20

    def test_meso_open_loop_applies_plan(self, catalog):
        log = run_closed_loop(loop(), SMALL, scenario(), catalog, 0, RunMode.MESO_OPEN_LOOP)
        assert all(d.mode is Mode.FALLBACK_REFERENCE for _, d in log.decisions)
        assert len(log.plans) >= 2


class TestCompare:
    def test_report_structure_and_aggregation(self, catalog):
        rep = compare_baselines(loop(), SMALL, scenario(step=0.5), catalog, [0, 1])
        assert len(rep["runs"]) == 8
        for mode in RunMode:
            costs = [r["true_cost"] for r in rep["runs"] if r["config"] == mode.value]
            assert rep["summary"][mode.value]["mean_true_cost"] == pytest.approx(np.mean(costs))
        json.dumps(rep)

    def test_no_seeds(self, catalog):
        with pytest.raises(ValueError):
            compare_baselines(loop(), SMALL, scenario(), catalog, [])
