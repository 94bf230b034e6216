import csv

import numpy as np
import pytest

from cranempc import crane, mpc, sim
from cranempc.crane import CraneState
from cranempc.mpc import MpcConfig, SolverError, discretize_step
from cranempc.sim import (
    CSV_COLUMNS,
    Disturbance,
    ObstacleEvent,
    RunLog,
    ScenarioSpec,
    apply_disturbance,
    metrics,
    pendulum_period,
    run_closed_loop,
    step_plant,
)

from conftest import GRID_LOWER, GRID_UPPER, POSE

CAPPED = MpcConfig(max_iterations=10, time_budget_ms=None)


def make_spec(params, **kw):
    base = dict(name="t", params=params, waypoints=[POSE], duration=3.0, mpc=CAPPED,
                grid_lower=GRID_LOWER, grid_upper=GRID_UPPER)
    base.update(kw)
    return ScenarioSpec(**base)


def rest(params, qA=POSE):
    return np.concatenate([crane.hanging_equilibrium(params, np.asarray(qA)), np.zeros(12)])


# ---------------------------------------------------------------- plant


def test_step_plant_equilibrium(params):
    x = rest(params)
    np.testing.assert_allclose(step_plant(params, x, np.zeros(5), 1e-3), x, atol=1e-14)
    state = step_plant(params, CraneState.from_vector(x), np.zeros(5), 1e-3)
    assert isinstance(state, CraneState)


@pytest.mark.parametrize("dt", [0.0, 0.02])
def test_step_plant_rejects_coarse_steps(params, dt):
    with pytest.raises(ValueError):
        step_plant(params, rest(params), np.zeros(5), dt)


def test_fine_plant_matches_controller_model(params):
    rng = np.random.default_rng(0)
    for scale, tol in ((1.0, 1e-2), (1e-3, 1e-5)):
        x = rest(params)
        x[5:7] += scale * rng.uniform(-0.3, 0.3, size=2)
        u = scale * rng.uniform(-params.u_max, params.u_max)
        fine = x
        for _ in range(100):
            fine = step_plant(params, fine, u, 1e-3)
        assert np.abs(fine - discretize_step(params, x, u, 0.1)).max() < tol


def test_disturbance_cases():
    state = CraneState(np.arange(7.0), np.arange(7.0) * 0.1, np.ones(5))
    same = apply_disturbance(state, [0.0, 0.0])
    np.testing.assert_array_equal(same.to_vector(), state.to_vector())
    hit = apply_disturbance(state, [0.4, 0.0])
    delta = hit.to_vector() - state.to_vector()
    assert hit.qd[5] == state.qd[5] + 0.4
    assert np.count_nonzero(delta) == 1
    with pytest.raises(ValueError):
        apply_disturbance(state, [np.inf, 0.0])
    np.testing.assert_array_equal(apply_disturbance(state.to_vector(), [0.4, 0.0]), hit.to_vector())


def test_period_matches_free_swing(params):
    P = pendulum_period(params, POSE)
    spec = make_spec(params, duration=6.0, controller="hold", disturbances=[Disturbance(0.0, np.array([0.05, 0.0]))])
    log = run_closed_loop(spec)
    eq = crane.hanging_equilibrium(params, POSE)[5]
    swing = log.q[:, 5] - eq
    t = log.t
    up = np.flatnonzero((swing[:-1] < 0) & (swing[1:] >= 0))
    crossings = t[up] - swing[up] * (t[up + 1] - t[up]) / (swing[up + 1] - swing[up])
    assert len(crossings) >= 3
    assert np.mean(np.diff(crossings)) == pytest.approx(P, rel=0.02)


def test_triple_pull_at_resonance_builds_up(params):
    P = pendulum_period(params, POSE)
    kick = np.array([0.1, 0.0])
    eq = crane.hanging_equilibrium(params, POSE)[5]
    single = run_closed_loop(make_spec(params, duration=8.0, controller="hold",
                                       disturbances=[Disturbance(0.0, kick)]))
    triple = run_closed_loop(make_spec(params, duration=8.0, controller="hold",
                                       disturbances=[Disturbance(round(k * P, 3), kick) for k in range(3)]))
    ratio = np.abs(triple.q[:, 5] - eq).max() / np.abs(single.q[:, 5] - eq).max()
    assert 2.5 < ratio < 3.2


# ---------------------------------------------------------------- metrics


def synthetic_log(params, n=60, swing=None, sd=None):
    q = np.tile(crane.hanging_equilibrium(params, POSE), (n, 1))
    qd = np.zeros((n, 7))
    if swing is not None:
        q[:, 5] += swing
        qd[:, 5] = np.gradient(swing, 0.1)
    sd = np.full((n, 3), 1.5) if sd is None else sd
    return RunLog(
        t=np.arange(n) * 0.1, q=q, qd=qd, u=np.zeros((n, 5)), tau=np.zeros(n), tau_dot=np.ones(n),
        flow=np.zeros(n), sd=sd, solve_time=np.full(n, 0.01), iterations=np.ones(n), objective=np.zeros(n),
        penalties={g: np.zeros(n) for g in mpc.PENALTY_GROUPS}, sd_substep=sd.min(axis=1).repeat(100),
        flow_substep=np.zeros(100 * n), final_state=CraneState(q[-1], qd[-1], np.zeros(5)), final_tau=0.0,
    )


def test_equilibrium_log_metrics(params):
    spec = make_spec(params, duration=6.0)
    model = sim.CollisionModel.build(params, 0.1)
    sd = np.tile(2.0 - (model.radii + model.inflation), (60, 1))
    m = metrics(synthetic_log(params, sd=sd), spec)
    assert m["settle_time"] == 0.0
    assert m["min_sd"] == pytest.approx(2.0 - 0.5)
    assert m["max_flow"] == 0.0
    assert not m["collision"]


def test_single_negative_row_flags_collision(params):
    sd = np.full((60, 3), 1.5)
    sd[17, 1] = -0.01
    m = metrics(synthetic_log(params, sd=sd), make_spec(params, duration=6.0))
    assert m["min_sd"] == -0.01 and m["collision"]


def test_settle_time_monotone_in_decay(params):
    t = np.arange(200) * 0.1
    times = []
    for rate in (0.3, 0.6, 1.2):
        swing = 0.3 * np.exp(-rate * t) * np.cos(3.6 * t)
        times.append(metrics(synthetic_log(params, 200, swing=swing), make_spec(params, duration=20.0))["settle_time"])
    assert times[0] > times[1] > times[2] > 0.0


def test_never_settling_log(params):
    t = np.arange(200) * 0.1
    m = metrics(synthetic_log(params, 200, swing=0.2 * np.cos(3.6 * t)), make_spec(params, duration=20.0))
    assert m["settle_time"] is None and not m["settled"]


# ---------------------------------------------------------------- closed loop


@pytest.fixture(scope="module")
def tracking_spec(scenario_params):
    spec = make_spec(scenario_params, waypoints=[POSE, [0.3, 0.6, -0.9, 1.4, 0.2]], duration=5.0)
    # start on the reference: its position and its (nonzero) initial velocity
    ref = spec.reference()
    qd = np.zeros(7)
    qd[:5] = ref(ref.start, 1)
    spec.initial_state = CraneState(crane.hanging_equilibrium(scenario_params, ref(ref.start)), qd, np.zeros(5))
    return spec


@pytest.fixture(scope="module")
def tracking_log(tracking_spec):
    return run_closed_loop(tracking_spec)


def test_tracking_on_empty_map(tracking_log, tracking_spec):
    m = metrics(tracking_log, tracking_spec)
    assert m["status"] == "ok"
    assert m["tracking_rmse"] < 0.02
    assert m["min_sd"] > 0.0


def test_log_shape_and_csv(tracking_log, tracking_spec, tmp_path):
    assert len(tracking_log) == tracking_spec.n_steps == 50
    assert np.all(np.diff(tracking_log.t) > 0)
    assert len(tracking_log.sd_substep) == 50 * tracking_spec.substeps
    tracking_log.to_csv(tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == tuple(CSV_COLUMNS)
    assert len(rows) == 51
    assert all(len(r) == len(CSV_COLUMNS) for r in rows)


def test_capped_runs_are_identical(tracking_log, tracking_spec):
    again = run_closed_loop(tracking_spec)
    assert again.rows().tobytes() == tracking_log.rows().tobytes()


def test_coarse_plant_reproduces_fine_plant(tracking_log, tracking_spec):
    coarse = run_closed_loop(tracking_spec, plant="coarse")
    fine_m = metrics(tracking_log, tracking_spec)
    coarse_m = metrics(coarse, tracking_spec)
    for key in ("min_sd", "min_sd_knots", "max_flow", "tracking_rmse", "final_goal_error", "final_qdA_norm",
                "final_tau"):
        assert coarse_m[key] == pytest.approx(fine_m[key], rel=0.02, abs=1e-4), key


def test_hold_baseline_keeps_swinging(params):
    spec = make_spec(params, duration=25.0, controller="hold", disturbances=[Disturbance(1.0, np.array([0.4, 0.0]))])
    m = metrics(run_closed_loop(spec), spec)
    assert not m["settled"]
    assert m["steps"] == 250


def test_obstacle_events_change_the_map(scenario_params):
    box = ObstacleEvent(np.array([6.0, -1.0, -3.0]), np.array([7.0, 1.0, 0.0]), insert_time=1.0, remove_time=2.0)
    spec = make_spec(scenario_params, controller="hold", obstacles=[box])
    log = run_closed_loop(spec)
    before, during, after = log.sd[5, 2], log.sd[15, 2], log.sd[25, 2]
    assert during < before and after == before


def test_solver_failure_truncates_log(scenario_params, monkeypatch):
    real = mpc.SwayDampingMPC.solve
    calls = {"n": 0}

    def flaky(self, state, tau, edf):
        calls["n"] += 1
        if calls["n"] > 5:
            raise SolverError("objective is not finite at the initial guess")
        return real(self, state, tau, edf)

    monkeypatch.setattr(mpc.SwayDampingMPC, "solve", flaky)
    log = run_closed_loop(make_spec(scenario_params, duration=2.0))
    assert log.status == "solver_failure"
    assert len(log) == 5
    assert "not finite" in log.message


def test_invalid_spec_refused(params):
    with pytest.raises(ValueError, match="integer multiple"):
        run_closed_loop(make_spec(params, control_period=0.1005))
