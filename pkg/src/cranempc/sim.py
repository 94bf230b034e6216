"""Closed-loop simulation of the crane under the sway-damping controller.

The plant is integrated with RK4 at a fine step while the controller runs
at the control period and holds its first control in between. Obstacle
events mutate the voxel map between solves and disturbance events add
velocity impulses to the pendulum joints.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import crane
from .collision import CollisionModel, link_distances
from .crane import CraneParams, CraneState, N_ACT, N_JOINTS
from .edf import VoxelEdf, VoxelGrid, set_box_obstacle, update_edf_incremental
from .mpc import PENALTY_GROUPS, MpcConfig, SolverError, SwayDampingMPC
from .reference import ReferenceSpline, plan_reference

CONTROLLERS = ("mpc", "hold")
SETTLE_ANGLE = 0.02
SETTLE_RATE = 0.02
SETTLE_WINDOW = 2.0

CSV_COLUMNS = (
    ["t"]
    + [f"q{i + 1}" for i in range(N_JOINTS)]
    + [f"qd{i + 1}" for i in range(N_JOINTS)]
    + [f"u{i + 1}" for i in range(N_ACT)]
    + ["tau", "tau_dot", "flow", "sd1", "sd2", "sd3", "sd_continuous_min", "flow_continuous_max",
       "iterations", "objective"]
    + [f"pen_{name}" for name in PENALTY_GROUPS]
)


@dataclass(frozen=True)
class ObstacleEvent:
    """Axis-aligned box present from ``insert_time`` until ``remove_time`` (s)."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    insert_time: float = 0.0
    remove_time: float | None = None

    def active(self, t: float) -> bool:
        started = t >= self.insert_time - 1e-9
        return started and (self.remove_time is None or t < self.remove_time - 1e-9)


@dataclass(frozen=True)
class Disturbance:
    """Pendulum velocity impulse ``impulse`` (rad/s) applied at ``time`` (s)."""

    time: float
    impulse: np.ndarray


@dataclass
class ScenarioSpec:
    """Declarative closed-loop experiment.

    ``waypoints`` are actuated-joint positions; the reference spline is
    timed with ``reference_speed`` times the velocity and acceleration
    limits. ``initial_state`` defaults to rest at the first waypoint with
    the pendulum hanging. ``controller`` is ``"mpc"`` or ``"hold"`` (zero
    velocity command, the uncontrolled baseline).
    """

    name: str
    params: CraneParams
    waypoints: np.ndarray
    duration: float
    mpc: MpcConfig = field(default_factory=MpcConfig)
    initial_state: CraneState | None = None
    reference_speed: float = 0.5
    grid_lower: np.ndarray = field(default_factory=lambda: np.array([-4.0, -9.0, -3.0]))
    grid_upper: np.ndarray = field(default_factory=lambda: np.array([12.0, 9.0, 10.0]))
    resolution: float = 0.1
    d_max: float = 2.0
    obstacles: list = field(default_factory=list)
    disturbances: list = field(default_factory=list)
    controller: str = "mpc"
    plant_dt: float = 1e-3
    control_period: float = 0.1
    goal_tolerance: float = 0.05
    expect_collision: bool = False
    runtime_budget_s: float | None = None
    description: str = ""

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        self.grid_lower = np.asarray(self.grid_lower, dtype=float)
        self.grid_upper = np.asarray(self.grid_upper, dtype=float)
        if self.initial_state is None:
            q = crane.hanging_equilibrium(self.params, self.waypoints[0])
            self.initial_state = CraneState.at_rest(q)

    @property
    def substeps(self) -> int:
        return int(round(self.control_period / self.plant_dt))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.control_period))

    def problems(self) -> list[str]:
        """Invariant violations as ``"field: message"`` strings (empty if valid)."""
        out = []
        if self.duration <= 0:
            out.append("run.duration: must be positive")
        if not 0 < self.plant_dt <= 1e-2:
            out.append("run.plant_dt: must lie in (0, 0.01]")
        if self.control_period <= 0:
            out.append("run.control_period: must be positive")
        elif self.plant_dt > 0:
            ratio = self.control_period / self.plant_dt
            if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
                out.append("run.control_period: must be an integer multiple of run.plant_dt")
            elif abs(self.duration / self.control_period - round(self.duration / self.control_period)) > 1e-6:
                out.append("run.duration: must be an integer multiple of run.control_period")
        if self.controller not in CONTROLLERS:
            out.append(f"run.controller: must be one of {', '.join(CONTROLLERS)}")
        if self.waypoints.shape[1] != N_ACT or len(self.waypoints) == 0:
            out.append("reference.waypoints: each waypoint needs 5 actuated joint values")
        else:
            lo, hi = self.params.q_min[:N_ACT], self.params.q_max[:N_ACT]
            for k, wp in enumerate(self.waypoints):
                if np.any(wp < lo) or np.any(wp > hi):
                    out.append(f"reference.waypoints[{k}]: outside the joint limits")
        if not 0 < self.reference_speed <= 1:
            out.append("reference.speed: must lie in (0, 1]")
        if np.any(self.grid_upper <= self.grid_lower):
            out.append("environment.upper: upper corner must exceed lower corner")
        if self.resolution <= 0:
            out.append("environment.resolution: must be positive")
        if self.d_max <= 0:
            out.append("environment.d_max: must be positive")
        for k, ev in enumerate(self.obstacles):
            name = f"environment.obstacles[{k}]"
            if np.any(np.asarray(ev.min_corner) > np.asarray(ev.max_corner)):
                out.append(f"{name}: min corner exceeds max corner")
            if not 0 <= ev.insert_time <= self.duration:
                out.append(f"{name}: insert time {ev.insert_time} outside [0, duration]")
            if ev.remove_time is not None and not ev.insert_time <= ev.remove_time <= self.duration:
                out.append(f"{name}: remove time {ev.remove_time} outside [insert time, duration]")
        for k, ev in enumerate(self.disturbances):
            name = f"disturbances[{k}]"
            if not 0 <= ev.time < self.duration:
                out.append(f"{name}: time {ev.time} outside [0, duration)")
            if np.shape(ev.impulse) != (2,) or not np.all(np.isfinite(ev.impulse)):
                out.append(f"{name}: impulse must be two finite values")
        if self.goal_tolerance <= 0:
            out.append("run.goal_tolerance: must be positive")
        return out

    def reference(self) -> ReferenceSpline:
        s = self.reference_speed
        return plan_reference(self.waypoints, s * self.params.u_max, s * self.params.qddA_max)

    def build_grid(self) -> VoxelGrid:
        return VoxelGrid.from_bounds(self.grid_lower, self.grid_upper, self.resolution)


@dataclass
class RunLog:
    """Per-control-step record of one closed-loop run.

    ``sd_substep`` holds the minimum over links of the signed distance at
    every plant substep, ``flow_substep`` the pump flow there.
    """

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    tau_dot: np.ndarray
    flow: np.ndarray
    sd: np.ndarray
    solve_time: np.ndarray
    iterations: np.ndarray
    objective: np.ndarray
    penalties: dict
    sd_substep: np.ndarray
    flow_substep: np.ndarray
    final_state: CraneState
    final_tau: float
    status: str = "ok"
    message: str = ""
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.t)

    def rows(self) -> np.ndarray:
        n = len(self)
        sub = self.sd_substep.reshape(n, -1) if n else np.zeros((0, 1))
        flow_sub = self.flow_substep.reshape(n, -1) if n else np.zeros((0, 1))
        cols = [
            self.t[:, None], self.q, self.qd, self.u, self.tau[:, None], self.tau_dot[:, None],
            self.flow[:, None], self.sd, sub.min(axis=1, initial=np.inf)[:, None],
            flow_sub.max(axis=1, initial=0.0)[:, None],
            self.iterations[:, None], self.objective[:, None],
        ] + [self.penalties[name][:, None] for name in PENALTY_GROUPS]
        return np.concatenate(cols, axis=1) if n else np.zeros((0, len(CSV_COLUMNS)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows():
                writer.writerow([repr(float(v)) for v in row])

    def timing_to_csv(self, path) -> None:
        """Solver wall times, kept apart from the deterministic log."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "solve_ms"])
            for t, s in zip(self.t, self.solve_time):
                writer.writerow([repr(float(t)), repr(1e3 * float(s))])


def step_plant(params: CraneParams, state, u, dt: float):
    """Advance the plant by one RK4 step of ``dt`` seconds (``dt <= 0.01``)."""
    if not 0 < dt <= 1e-2:
        raise ValueError("plant step must lie in (0, 0.01] s")
    vec = state.to_vector() if isinstance(state, CraneState) else np.asarray(state, dtype=float)
    nxt = np.asarray(crane._rk4_jit(params, jnp.asarray(vec), jnp.asarray(u, dtype=float), dt))
    return CraneState.from_vector(nxt) if isinstance(state, CraneState) else nxt


def apply_disturbance(state, impulse):
    """Add ``impulse`` to the pendulum joint velocities."""
    impulse = np.asarray(impulse, dtype=float).reshape(crane.N_PAS)
    if not np.all(np.isfinite(impulse)):
        raise ValueError("impulse must be finite")
    if isinstance(state, CraneState):
        qd = state.qd.copy()
        qd[N_ACT:] += impulse
        return CraneState(state.q.copy(), qd, state.qddA.copy())
    x = np.array(state, dtype=float)
    x[N_JOINTS + N_ACT: 2 * N_JOINTS] += impulse
    return x


def pendulum_period(params: CraneParams, qA) -> float:
    """Longest small-oscillation period of the pendulum hanging below ``qA``."""
    q = crane.hanging_equilibrium(params, qA)

    def accel(qP):
        full = jnp.concatenate([jnp.asarray(q[:N_ACT]), qP])
        return crane._passive_accel(params, full, jnp.zeros(N_JOINTS), jnp.zeros(N_ACT))

    K = -np.asarray(jax.jacfwd(accel)(jnp.asarray(q[N_ACT:])))
    omega2 = np.linalg.eigvals(K).real
    return float(2.0 * np.pi / np.sqrt(np.min(omega2)))


def _plant_period(params, model, field_, x, u, impulses, dt):
    def sub(x, impulse):
        x = x.at[N_JOINTS + N_ACT: 2 * N_JOINTS].add(impulse)
        x = crane._rk4(params, x, u, dt)
        sd = jnp.min(link_distances(params, model, field_, x[:N_JOINTS]))
        flow = crane._pump_flow(params, x[N_JOINTS: N_JOINTS + N_ACT])
        return x, (sd, flow)

    x, (sd, flow) = jax.lax.scan(sub, x, impulses)
    return x, sd, flow


_plant_period_jit = jax.jit(_plant_period)
_link_distances_jit = jax.jit(link_distances)


def _coarse_period(params, model, field_, x, u, impulse, T):
    x = x.at[N_JOINTS + N_ACT: 2 * N_JOINTS].add(impulse)
    x = crane._rk4(params, x, u, T)
    sd = jnp.min(link_distances(params, model, field_, x[:N_JOINTS]))
    flow = crane._pump_flow(params, x[N_JOINTS: N_JOINTS + N_ACT])
    return x, sd[None], flow[None]


_coarse_period_jit = jax.jit(_coarse_period)


class _Environment:
    """Voxel map kept in line with the scenario's obstacle events."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.edf = VoxelEdf.empty(spec.build_grid(), spec.d_max)
        self.active = None

    def sync(self, t: float) -> bool:
        active = tuple(ev.active(t) for ev in self.spec.obstacles)
        if active == self.active:
            return False
        self.active = active
        target = self.edf.grid.copy()
        target.occupancy[...] = False
        for ev, on in zip(self.spec.obstacles, active):
            if on:
                set_box_obstacle(target, ev.min_corner, ev.max_corner, True)
        changed = np.flatnonzero(target.occupancy.ravel() != self.edf.grid.occupancy.ravel())
        if changed.size:
            self.edf.grid.occupancy[...] = target.occupancy
            update_edf_incremental(self.edf, changed)
        return bool(changed.size)


def run_closed_loop(spec: ScenarioSpec, plant: str = "fine") -> RunLog:
    """Simulate ``spec``; ``plant="coarse"`` integrates one RK4 step per control period.

    A solver error ends the run early with ``status="solver_failure"``.
    """
    problems = spec.problems()
    if problems:
        raise ValueError("invalid scenario: " + "; ".join(problems))
    if plant not in ("fine", "coarse"):
        raise ValueError("plant must be 'fine' or 'coarse'")
    start = time.perf_counter()
    params = spec.params
    model = CollisionModel.build(params, spec.resolution)
    spline = spec.reference()
    env = _Environment(spec)
    controller = SwayDampingMPC(params, spec.mpc, spline, model) if spec.controller == "mpc" else None

    n_sub = spec.substeps if plant == "fine" else 1
    dt = spec.plant_dt if plant == "fine" else spec.control_period
    x = spec.initial_state.to_vector()
    tau = float(spline.start)

    if controller is not None:
        # compile and load the solver kernels outside the timed loop
        env.sync(0.0)
        controller.warmup(x, tau, env.edf)

    rec = {k: [] for k in ("t", "q", "qd", "u", "tau", "tau_dot", "flow", "sd", "solve_time",
                           "iterations", "objective", "sd_substep", "flow_substep")}
    pens = {name: [] for name in PENALTY_GROUPS}
    status, message = "ok", ""
    for k in range(spec.n_steps):
        t = k * spec.control_period
        env.sync(t)
        field_ = env.edf.field()
        impulses = _impulses(spec, t, n_sub, dt)
        if controller is not None:
            try:
                sol = controller.solve(x, tau, env.edf)
            except SolverError as exc:
                status, message = "solver_failure", f"t={t:.3f}: {exc}"
                break
            u, td = np.asarray(sol.u0), float(sol.tau_dot[0])
            solve_time, iters, obj, totals = sol.wall_time, sol.iterations, sol.objective, sol.penalties
        else:
            u, td = np.zeros(N_ACT), 1.0
            solve_time, iters, obj, totals = 0.0, 0, 0.0, {}
        if not np.all(np.isfinite(u)):
            status, message = "solver_failure", f"t={t:.3f}: non-finite control"
            break
        rec["t"].append(t)
        rec["q"].append(x[:N_JOINTS])
        rec["qd"].append(x[N_JOINTS: 2 * N_JOINTS])
        rec["u"].append(u)
        rec["tau"].append(tau)
        rec["tau_dot"].append(td)
        rec["flow"].append(float(crane._pump_flow(params, x[N_JOINTS: N_JOINTS + N_ACT])))
        rec["sd"].append(np.asarray(_link_distances_jit(params, model, field_, jnp.asarray(x[:N_JOINTS]))))
        rec["solve_time"].append(solve_time)
        rec["iterations"].append(iters)
        rec["objective"].append(obj)
        for name in PENALTY_GROUPS:
            pens[name].append(totals.get(name, 0.0))

        if plant == "fine":
            x_new, sd_sub, flow_sub = _plant_period_jit(params, model, field_, jnp.asarray(x), jnp.asarray(u),
                                                        jnp.asarray(impulses), dt)
        else:
            x_new, sd_sub, flow_sub = _coarse_period_jit(params, model, field_, jnp.asarray(x), jnp.asarray(u),
                                                         jnp.asarray(impulses[0]), dt)
        x = np.asarray(x_new)
        rec["sd_substep"].append(np.asarray(sd_sub))
        rec["flow_substep"].append(np.asarray(flow_sub))
        tau += spec.control_period * td
        if not np.all(np.isfinite(x)):
            status, message = "solver_failure", f"t={t:.3f}: plant state diverged"
            break

    def arr(key, width=None):
        if rec[key]:
            return np.asarray(rec[key], dtype=float)
        return np.zeros((0,) if width is None else (0, width))

    return RunLog(
        t=arr("t"), q=arr("q", N_JOINTS), qd=arr("qd", N_JOINTS), u=arr("u", N_ACT),
        tau=arr("tau"), tau_dot=arr("tau_dot"), flow=arr("flow"), sd=arr("sd", 3),
        solve_time=arr("solve_time"), iterations=arr("iterations"), objective=arr("objective"),
        penalties={name: np.asarray(v, dtype=float) for name, v in pens.items()},
        sd_substep=np.concatenate(rec["sd_substep"]) if rec["sd_substep"] else np.zeros(0),
        flow_substep=np.concatenate(rec["flow_substep"]) if rec["flow_substep"] else np.zeros(0),
        final_state=CraneState.from_vector(x) if np.all(np.isfinite(x)) else spec.initial_state,
        final_tau=tau,
        status=status,
        message=message,
        wall_time=time.perf_counter() - start,
    )


def _impulses(spec: ScenarioSpec, t: float, n_sub: int, dt: float) -> np.ndarray:
    """Impulse added before each substep of the period starting at ``t``."""
    out = np.zeros((n_sub, crane.N_PAS))
    for ev in spec.disturbances:
        offset = ev.time - t
        if -1e-9 <= offset < n_sub * dt - 1e-9:
            out[min(int(round(offset / dt)), n_sub - 1)] += np.asarray(ev.impulse, dtype=float)
    return out


def _settle_time(t, q, qd, qA, params, t0) -> float | None:
    """First time after ``t0`` from which the sway stays small for the settle window."""
    eq = np.array([crane.hanging_equilibrium(params, a)[N_ACT:] for a in qA])
    small = (np.all(np.abs(q[:, N_ACT:] - eq) < SETTLE_ANGLE, axis=1)
             & np.all(np.abs(qd[:, N_ACT:]) < SETTLE_RATE, axis=1))
    end = t[-1]
    for i in np.flatnonzero(t >= t0 - 1e-9):
        if t[i] + SETTLE_WINDOW > end + 1e-9:
            return None
        window = (t >= t[i] - 1e-9) & (t <= t[i] + SETTLE_WINDOW + 1e-9)
        if np.all(small[window]):
            return float(t[i] - t0)
    return None


def metrics(log: RunLog, spec: ScenarioSpec) -> dict:
    """Summary figures of a run (times in s, distances in m, flow in m^3/s)."""
    if len(log) == 0:
        raise ValueError("empty run log")
    params = spec.params
    t0 = max((ev.time for ev in spec.disturbances), default=0.0)
    # include the final state so the record covers the whole duration
    t = np.append(log.t, log.t[-1] + spec.control_period)
    q = np.vstack([log.q, log.final_state.q])
    qd = np.vstack([log.qd, log.final_state.qd])
    settle = _settle_time(t, q, qd, q[:, :N_ACT], params, t0)

    spline = spec.reference()
    errors = log.q[:, :N_ACT] - spline(log.tau)
    goal = spec.waypoints[-1]
    min_sd = float(min(log.sd.min(), log.sd_substep.min(initial=np.inf)))
    solve_ms = 1e3 * log.solve_time
    last = log.t >= log.t[-1] + spec.control_period - 1.0 - 1e-9
    final = log.final_state
    return {
        "scenario": spec.name,
        "status": log.status,
        "message": log.message,
        "controller": spec.controller,
        "collision_enabled": bool(spec.mpc.collision_enabled),
        "flow_enabled": bool(spec.mpc.flow_enabled),
        "steps": len(log),
        "settled": settle is not None,
        "settle_time": settle,
        "pendulum_period": pendulum_period(params, spec.initial_state.q[:N_ACT]),
        "min_sd": min_sd,
        "min_sd_knots": float(log.sd.min()),
        "collision": bool(min_sd <= 0.0),
        "max_flow": float(max(log.flow.max(), log.flow_substep.max(initial=0.0))),
        "Q_max": float(params.Q_max),
        "tracking_rmse": float(np.sqrt(np.mean(np.sum(errors**2, axis=1)))),
        "final_goal_error": float(np.max(np.abs(final.q[:N_ACT] - goal))),
        "goal_reached": bool(np.max(np.abs(final.q[:N_ACT] - goal)) <= spec.goal_tolerance),
        "final_qdA_norm": float(np.linalg.norm(final.qd[:N_ACT])),
        "tau_dot_mean_last_second": float(np.mean(log.tau_dot[last])),
        "final_tau": float(log.final_tau),
        "mean_solve_ms": float(solve_ms.mean()),
        "p95_solve_ms": float(np.percentile(solve_ms, 95)),
        "max_solve_ms": float(solve_ms.max()),
        "wall_time_s": float(log.wall_time),
    }


def write_outputs(log: RunLog, spec: ScenarioSpec, out_dir) -> dict:
    """Write ``log.csv`` and ``metrics.json`` into ``out_dir``; returns the metrics."""
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "log.csv")
    log.timing_to_csv(out / "timing.csv")
    summary = metrics(log, spec)
    with open(out / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
    return summary


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")
