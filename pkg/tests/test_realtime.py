import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tritier.meso import MesoConfig, Particle, ReferencePlan, assemble_plan, predicted_sensors
from tritier.mor import PodBasis, lift
from tritier.plant import ControlTrajectory, Observation, PlantParams, ScenarioParams, still_water
from tritier.realtime import (
    EstimatorWindow, LtvModel, Mode, PlanExpired, RealtimeLayer, TrackingConfig, build_tracking_qp,
    estimate_reduced_state, rt_step,
)
from tritier.solvers import solve_box_qp

SMALL = PlantParams(n_cells=10, domain_length=2000.0)
CELLS = list(range(10))


def scenario():
    return ScenarioParams(np.full(4, 1.0), np.array([40.0, 60.0, 60.0, 40.0]), 3.0, (1.0, 3.0), 600.0)


@pytest.fixture(scope="module")
def plan():
    cfg = MesoConfig(intervals=3, horizon=600.0, t2=300.0, validity_margin=300.0, energy_target=0.99)
    return assemble_plan(Particle(np.array([0.8, 1.2, 1.0])), SMALL, still_water(SMALL, 2.0), scenario(), cfg)


class ConstantModel:
    """Time-invariant reduced dynamics for closed-form oracles."""

    def __init__(self, A, B):
        self.A, self.B = np.atleast_2d(A), np.atleast_2d(B).reshape(-1, 1)

    def matrices(self, t):
        return self.A, self.B


def scalar_plan(u_ref=1.5, valid_until=1e6):
    basis = PodBasis(np.array([[1.0]]), np.ones(1), 1.0, np.zeros(1))
    times = np.array([0.0, 1e6])
    return ReferencePlan(0, basis, times, np.zeros((1, 2)), ControlTrajectory(np.array([u_ref]), 0.0, 1e6),
                         0.0, valid_until, 0.0)


def window_of(obs):
    w = EstimatorWindow(len(obs))
    for o in obs:
        w.push(o)
    return w


class TestEstimator:
    def test_window_rejects_non_increasing(self):
        w = EstimatorWindow(3)
        w.push(Observation(1.0, [0], np.zeros(1)))
        with pytest.raises(ValueError):
            w.push(Observation(1.0, [0], np.zeros(1)))

    def test_window_capacity(self):
        w = EstimatorWindow(2)
        for t in range(5):
            w.push(Observation(float(t), [0], np.zeros(1)))
        assert len(w) == 2 and w.latest.t == 4.0

    def test_noiseless_constant_state(self, plan):
        S = plan.basis.modes[CELLS, :]
        assert np.linalg.matrix_rank(S) == plan.basis.r
        z_star = plan.reference_at(100.0) + 0.3
        y = lift(plan.basis, z_star)[CELLS]
        w = window_of([Observation(30.0 * k, CELLS, y) for k in range(6)])
        z = estimate_reduced_state(w, plan, CELLS, t_now=150.0)
        assert np.allclose(z, z_star, atol=1e-8)

    def test_single_observation_projects(self, plan):
        y = 2.0 + 0.05 * np.sin(np.arange(10.0))
        z = estimate_reduced_state(window_of([Observation(0.0, CELLS, y)]), plan, CELLS)
        S = plan.basis.modes[CELLS, :]
        oracle, *_ = np.linalg.lstsq(S, y - plan.basis.mean_state[CELLS], rcond=None)
        assert np.allclose(z, oracle, atol=1e-6)

    def test_noisy_matches_normal_equations(self, plan):
        rng = np.random.default_rng(0)
        y0 = lift(plan.basis, plan.reference_at(0.0))[CELLS]
        obs = [Observation(float(k), CELLS, y0 + rng.normal(0, 0.01, 10)) for k in range(20)]
        z = estimate_reduced_state(window_of(obs), plan, CELLS, t_now=19.0, forgetting=1.0)
        S = plan.basis.modes[CELLS, :]
        A = np.vstack([np.hstack([S, (o.t - 19.0) * S]) for o in obs])
        b = np.concatenate([o.values - plan.basis.mean_state[CELLS] for o in obs])
        oracle = np.linalg.solve(A.T @ A, A.T @ b)[:plan.basis.r]
        assert np.allclose(z, oracle, atol=1e-7)

    def test_prior_weight_pulls_to_reference(self, plan):
        y = lift(plan.basis, plan.reference_at(0.0) + 1.0)[CELLS]
        w = window_of([Observation(0.0, CELLS, y)])
        ref = plan.reference_at(0.0)
        loose = estimate_reduced_state(w, plan, CELLS, prior_weight=0.0)
        tight = estimate_reduced_state(w, plan, CELLS, prior_weight=1e6)
        assert np.linalg.norm(tight - ref) < 1e-3 < np.linalg.norm(loose - ref)


class TestTrackingQp:
    def test_on_reference_zero_deviation(self):
        cfg = TrackingConfig(horizon_steps=4)
        tq = build_tracking_qp(scalar_plan(), np.zeros(1), 0.0, cfg, ConstantModel(0.9, 0.5))
        sol = solve_box_qp(tq.qp)
        assert np.abs(sol.x).max() <= 1e-12

    def test_heavy_input_penalty(self):
        cfg = TrackingConfig(horizon_steps=4, r_weight=1e8)
        tq = build_tracking_qp(scalar_plan(), np.array([2.0]), 0.0, cfg, ConstantModel(0.9, 0.5))
        assert np.abs(solve_box_qp(tq.qp).x).max() <= 1e-4 * cfg.u_max

    def test_two_step_lq_closed_form(self):
        a, b, q, r, z0 = 0.9, 0.5, 1.0, 1.0, 0.4
        cfg = TrackingConfig(horizon_steps=2, q_weight=q, r_weight=r)
        tq = build_tracking_qp(scalar_plan(), np.array([z0]), 0.0, cfg, ConstantModel(a, b))
        x = solve_box_qp(tq.qp).x
        # J = q (a z0 + b u0)^2 + q (a^2 z0 + a b u0 + b u1)^2 + r (u0^2 + u1^2); solve dJ/du = 0 by Cramer
        h11 = q * b * b + q * a * a * b * b + r
        h12 = q * a * b * b
        h22 = q * b * b + r
        c1 = q * a * b * z0 + q * a ** 3 * b * z0
        c2 = q * a * a * b * z0
        det = h11 * h22 - h12 * h12
        u0 = (-c1 * h22 + c2 * h12) / det
        u1 = (-c2 * h11 + c1 * h12) / det
        assert np.allclose(x, [u0, u1], atol=1e-8)

    def test_bounds_keep_control_feasible(self):
        cfg = TrackingConfig(horizon_steps=3, r_weight=1e-6)
        tq = build_tracking_qp(scalar_plan(u_ref=2.9), np.array([50.0]), 0.0, cfg, ConstantModel(1.0, 1.0))
        x = solve_box_qp(tq.qp).x
        assert np.all(tq.u_ref + x >= -1e-12) and np.all(tq.u_ref + x <= cfg.u_max + 1e-12)

    def test_expired(self):
        with pytest.raises(PlanExpired):
            build_tracking_qp(scalar_plan(valid_until=10.0), np.zeros(1), 10.0, TrackingConfig(),
                              ConstantModel(1.0, 1.0))


class TestLtvModel:
    def test_jacobians_cached_and_finite(self, plan):
        model = LtvModel(plan, SMALL, scenario(), 30.0)
        A, B = model.matrices(60.0)
        assert A.shape == (plan.basis.r, plan.basis.r) and B.shape == (plan.basis.r, 1)
        assert np.all(np.isfinite(A)) and np.all(np.isfinite(B))
        assert model.matrices(60.0)[0] is A


class TestRtStep:
    def test_no_plan_holds_zero(self):
        d, sol = rt_step(None, EstimatorWindow(3), None, TrackingConfig(), 0.0, CELLS)
        assert d.mode is Mode.FALLBACK_HOLD and d.control == 0.0 and sol is None

    def test_on_reference_tracks_reference(self, plan):
        layer = RealtimeLayer(SMALL, scenario(), CELLS, TrackingConfig(horizon_steps=4))
        d = layer.step(Observation(0.0, CELLS, predicted_sensors(plan, 0.0, CELLS)), plan, 0.0)
        assert d.mode is Mode.TRACKED
        assert d.est_err < 1e-8
        assert d.control == pytest.approx(plan.control_at(0.0), abs=1e-6)
        assert d.solve_time <= layer.cfg.deadline

    def test_expired_plan_falls_back(self, plan):
        w = window_of([Observation(700.0, CELLS, np.full(10, 2.0))])
        d, _ = rt_step(plan, w, None, TrackingConfig(), 700.0, CELLS, model=object())
        assert d.mode is Mode.FALLBACK_REFERENCE
        assert d.control == plan.control_at(700.0)

    def test_deadline_overrun_falls_back(self):
        plan = scalar_plan()
        cfg = TrackingConfig(horizon_steps=3, cost_per_qp_iter=10.0, deadline=1.0)
        obs = Observation(0.0, [0], np.array([5.0]))
        d, _ = rt_step(plan, window_of([obs]), None, cfg, 0.0, [0], ConstantModel(1.0, 1.0))
        assert d.qp_iterations > 0
        assert d.mode is Mode.FALLBACK_REFERENCE and d.control == 1.5

    @given(st.floats(-100, 100), st.floats(0.0, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_totality(self, y, u_ref):
        plan = scalar_plan(u_ref=u_ref)
        obs = Observation(0.0, [0], np.array([y]))
        d, _ = rt_step(plan, window_of([obs]), None, TrackingConfig(horizon_steps=3), 0.0, [0],
                       ConstantModel(1.1, -0.7))
        assert 0.0 <= d.control <= 3.0


class TestWarmStart:
    def test_warm_no_worse_than_cold(self):
        rng = np.random.default_rng(0)
        r = 3
        A = np.eye(r) + 0.05 * rng.normal(size=(r, r))
        B = rng.normal(size=(r, 1))
        model = ConstantModel(A, B)
        basis = PodBasis(np.eye(r), np.ones(r), 1.0, np.zeros(r))
        plan = ReferencePlan(0, basis, np.array([0.0, 1e6]), np.zeros((r, 2)),
                             ControlTrajectory(np.array([1.5]), 0.0, 1e6), 0.0, 1e6, 0.0)
        cfg = TrackingConfig(horizon_steps=10, r_weight=0.05)
        warm, warm_iters, cold_iters = None, [], []
        for k in range(50):
            z = np.array([3.0 * np.sin(0.1 * k), 2.0 * np.cos(0.07 * k), 1.0])
            qp = build_tracking_qp(plan, z, 30.0 * k, cfg, model).qp
            w = solve_box_qp(qp, warm)
            c = solve_box_qp(qp)
            assert np.allclose(w.x, c.x, atol=1e-8)
            warm_iters.append(w.iterations)
            cold_iters.append(c.iterations)
            warm = w.shifted()
        assert np.mean(warm_iters) <= np.mean(cold_iters)
