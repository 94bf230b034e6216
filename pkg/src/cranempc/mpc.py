"""Collision-free sway-damping MPC.

The optimal control problem is solved by single shooting over the control
sequence ``U`` and the progress rates ``tau_dot``. Every inequality (joint,
acceleration, pump-flow, collision and progress-rate limits) is relaxed into
a one-sided quadratic penalty with margin ``eps`` and weight ``mu = 10/eps``,
so the objective is a plain sum of squared residuals. The solver takes
projected Gauss-Newton / Levenberg-Marquardt steps on it with an Armijo
backtracking line search, bounded by an iteration cap and a wall-clock
budget.

Residual Jacobians are assembled from per-step dynamics Jacobians (computed
in one batched call) and a forward sensitivity recursion, which is much
cheaper than differentiating the sequential rollout directly.
"""

from __future__ import annotations

import dataclasses
import functools
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from . import crane
from .collision import CollisionModel, link_distances
from .edf import EdfField, VoxelEdf
from .reference import ReferenceSpline, spline_eval_jax

N_ACT = crane.N_ACT
N_STATE = crane.N_STATE

PENALTY_GROUPS = ("joint", "accel", "flow", "collision", "tau_dot")
_COST_SIZE = N_ACT + crane.N_PAS + N_ACT + N_ACT + 1
_GROUP_SLICES = {}
_offset = _COST_SIZE
for _name, _size in (("joint", 2 * crane.N_JOINTS), ("accel", 2 * N_ACT), ("flow", 1),
                     ("collision", 3), ("tau_dot", 2)):
    _GROUP_SLICES[_name] = slice(_offset, _offset + _size)
    _offset += _size
RESIDUAL_SIZE = _offset


class SolverError(RuntimeError):
    """The OCP could not be evaluated (e.g. non-finite objective)."""


@dataclass
class MpcConfig:
    """Horizon, weights, penalty margins and solver settings.

    Margins: ``eps_collision`` in m; joint and acceleration margins as a
    fraction of each joint's range; ``eps_flow`` as a fraction of ``Q_max``
    (the flow residual is normalized by ``Q_max``); ``eps_tau_dot`` absolute.
    Penalty weights are never set directly: ``mu = 10 / eps`` per group.
    """

    N: int = 40
    T_s: float = 0.1
    w_track: float = 1.0
    w_damp: float = 0.1
    w_vel: float = 0.01
    w_accl: float = 0.1
    w_prog: float = 0.2
    eps_collision: float = 0.2
    eps_joint: float = 0.05
    eps_accel: float = 0.05
    eps_flow: float = 0.05
    eps_tau_dot: float = 0.01
    tau_dot_min: float = 0.0
    tau_dot_max: float = 1.5
    collision_enabled: bool = True
    flow_enabled: bool = True
    max_iterations: int = 30
    time_budget_ms: float | None = 70.0
    armijo_c: float = 1e-4
    step_fractions: tuple = (1.0, 0.5, 0.25, 0.1)
    lm_damping: float = 1e-6
    tolerance: float = 1e-8

    def __post_init__(self):
        if int(self.N) < 2:
            raise ValueError("horizon N must be at least 2")
        self.N = int(self.N)
        if self.T_s <= 0:
            raise ValueError("T_s must be positive")
        for name in ("w_track", "w_damp", "w_vel", "w_accl", "w_prog"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("eps_collision", "eps_joint", "eps_accel", "eps_flow", "eps_tau_dot"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.tau_dot_min < self.tau_dot_max:
            raise ValueError("tau_dot bounds are inverted")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        self.step_fractions = tuple(float(a) for a in self.step_fractions)

    @staticmethod
    def mu_for(eps):
        """Penalty weight tied to the margin: ``mu = 10 / eps``."""
        return 10.0 / np.asarray(eps, dtype=float)

    def margins(self, params: crane.CraneParams) -> dict:
        return {
            "joint": self.eps_joint * (params.q_max - params.q_min),
            "accel": self.eps_accel * (params.qddA_max - params.qddA_min),
            "flow": np.asarray(self.eps_flow),
            "collision": np.asarray(self.eps_collision),
            "tau_dot": np.asarray(self.eps_tau_dot),
        }

    def mus(self, params: crane.CraneParams) -> dict:
        return {k: self.mu_for(v) for k, v in self.margins(params).items()}

    def replace(self, **changes) -> "MpcConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["step_fractions"] = list(self.step_fractions)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MpcConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown mpc setting(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class OcpSolution:
    """Optimized trajectories of one MPC solve.

    ``X[k]`` is the state at knot ``k`` (``X[0]`` the initial state), obtained
    by rolling out ``U`` through the RK4 model; ``tau[k+1] = tau[k] +
    tau_dot[k] * T_s``.
    """

    X: np.ndarray
    U: np.ndarray
    tau: np.ndarray
    tau_dot: np.ndarray
    objective: float = float("nan")
    penalties: dict = field(default_factory=dict)
    iterations: int = 0
    wall_time: float = 0.0
    converged: bool = False

    @property
    def u0(self) -> np.ndarray:
        return self.U[0]


class _Context(NamedTuple):
    params: crane.CraneParams
    model: CollisionModel
    field: EdfField
    spline: tuple
    weights: jax.Array
    q_min: jax.Array
    q_max: jax.Array
    eps_joint: jax.Array
    eps_accel: jax.Array
    scalars: jax.Array  # eps_flow, eps_collision, eps_tau_dot, tau_min, tau_max, collision on, flow on
    T_s: jax.Array


def penalty(h, eps, mu):
    """One-sided quadratic barrier: ``mu/2 * (h - eps)^2`` below the margin, else 0."""
    gap = np.minimum(np.asarray(h, dtype=float) - eps, 0.0)
    out = 0.5 * mu * gap**2
    return float(out) if np.ndim(out) == 0 else out


def _pen(h, eps, mu_half_sqrt):
    return mu_half_sqrt * jnp.minimum(h - eps, 0.0)


def _stage_residual(ctx: _Context, x, tau, tau_dot):
    params = ctx.params
    q = x[: crane.N_JOINTS]
    qd = x[crane.N_JOINTS: 2 * crane.N_JOINTS]
    qddA = x[2 * crane.N_JOINTS:]
    w = jnp.sqrt(ctx.weights)
    q_ref = spline_eval_jax(ctx.spline, tau)
    eps_flow, eps_col, eps_td, td_min, td_max, col_on, flow_on = ctx.scalars

    def root(eps):
        return jnp.sqrt(0.5 * 10.0 / eps)

    joint = jnp.concatenate([
        _pen(q - ctx.q_min, ctx.eps_joint, root(ctx.eps_joint)),
        _pen(ctx.q_max - q, ctx.eps_joint, root(ctx.eps_joint)),
    ])
    accel = jnp.concatenate([
        _pen(qddA - params.qddA_min, ctx.eps_accel, root(ctx.eps_accel)),
        _pen(params.qddA_max - qddA, ctx.eps_accel, root(ctx.eps_accel)),
    ])
    flow = crane._pump_flow(params, qd[:N_ACT])
    flow_h = (params.Q_max - flow) / params.Q_max
    flow_r = flow_on * _pen(flow_h, eps_flow, root(eps_flow))
    sd = link_distances(params, ctx.model, ctx.field, q)
    col_r = col_on * _pen(sd, eps_col, root(eps_col))
    td_r = jnp.stack([
        _pen(tau_dot - td_min, eps_td, root(eps_td)),
        _pen(td_max - tau_dot, eps_td, root(eps_td)),
    ])
    return jnp.concatenate([
        w[0] * (q[:N_ACT] - q_ref),
        w[1] * qd[N_ACT:],
        w[2] * qd[:N_ACT],
        w[3] * qddA,
        jnp.atleast_1d(w[4] * (tau_dot - 1.0)),
        joint,
        accel,
        jnp.atleast_1d(flow_r),
        col_r,
        td_r,
    ])


def _split(z, N):
    return z[: N * N_ACT].reshape(N, N_ACT), z[N * N_ACT:]


def _rollout(ctx: _Context, x0, U):
    def step(x, u):
        nxt = crane._rk4(ctx.params, x, u, ctx.T_s)
        return nxt, nxt

    _, tail = jax.lax.scan(step, x0, U[:-1])
    return jnp.concatenate([x0[None], tail], axis=0)


def _taus(ctx: _Context, tau0, tau_dot):
    return tau0 + ctx.T_s * jnp.concatenate([jnp.zeros(1), jnp.cumsum(tau_dot[:-1])])


def _evaluate(ctx: _Context, z, x0, tau0):
    N = z.shape[0] // (N_ACT + 1)
    U, tau_dot = _split(z, N)
    X = _rollout(ctx, x0, U)
    taus = _taus(ctx, tau0, tau_dot)
    R = jax.vmap(_stage_residual, in_axes=(None, 0, 0, 0))(ctx, X, taus, tau_dot)
    return R, X, taus


def _linearize(ctx: _Context, z, x0, tau0):
    """Residuals and their Jacobian with respect to ``z = [U, tau_dot]``."""
    N = z.shape[0] // (N_ACT + 1)
    U, tau_dot = _split(z, N)
    R, X, taus = _evaluate(ctx, z, x0, tau0)

    step_jac = jax.vmap(jax.jacfwd(lambda x, u: crane._rk4(ctx.params, x, u, ctx.T_s), argnums=(0, 1)))
    A, B = step_jac(X[:-1], U[:-1])
    stage_jac = jax.vmap(jax.jacfwd(_stage_residual, argnums=(1, 2, 3)), in_axes=(None, 0, 0, 0))
    Rx, Rtau, Rtd = stage_jac(ctx, X, taus, tau_dot)

    n_u = N * N_ACT

    def sens(G, inputs):
        Ak, Bk, k = inputs
        G = Ak @ G
        G = jax.lax.dynamic_update_slice(G, jax.lax.dynamic_slice(G, (0, k * N_ACT), (N_STATE, N_ACT)) + Bk,
                                         (0, k * N_ACT))
        return G, G

    G0 = jnp.zeros((N_STATE, n_u))
    _, Gs = jax.lax.scan(sens, G0, (A, B, jnp.arange(N - 1)))
    Gs = jnp.concatenate([G0[None], Gs], axis=0)
    J_u = jnp.einsum("kmi,kij->kmj", Rx, Gs)

    lower = jnp.tril(jnp.ones((N, N)), k=-1) * ctx.T_s  # d tau_k / d tau_dot_j
    J_td = Rtau[:, :, None] * lower[:, None, :] + Rtd[:, :, None] * jnp.eye(N)[:, None, :]
    J = jnp.concatenate([J_u, J_td], axis=2).reshape(N * RESIDUAL_SIZE, n_u + N)
    return R.reshape(-1), J, X, taus


_evaluate_jit = jax.jit(_evaluate)
_linearize_jit = jax.jit(_linearize)
_stage_residual_jit = jax.jit(_stage_residual)


def _make_context(params, model, edf, spline, config: MpcConfig) -> _Context:
    field_ = edf.field() if isinstance(edf, VoxelEdf) else edf
    spline_arrays = spline.device_arrays() if isinstance(spline, ReferenceSpline) else spline
    margins = config.margins(params)
    return _Context(
        params=params,
        model=model,
        field=field_,
        spline=spline_arrays,
        weights=jnp.asarray([config.w_track, config.w_damp, config.w_vel, config.w_accl, config.w_prog]),
        q_min=jnp.asarray(params.q_min),
        q_max=jnp.asarray(params.q_max),
        eps_joint=jnp.asarray(margins["joint"]),
        eps_accel=jnp.asarray(margins["accel"]),
        scalars=jnp.asarray([
            config.eps_flow, config.eps_collision, config.eps_tau_dot,
            config.tau_dot_min, config.tau_dot_max,
            1.0 if config.collision_enabled else 0.0,
            1.0 if config.flow_enabled else 0.0,
        ]),
        T_s=jnp.asarray(config.T_s),
    )


@functools.lru_cache(maxsize=8)
def _cost_rows(N: int) -> np.ndarray:
    mask = np.zeros((N, RESIDUAL_SIZE), dtype=bool)
    mask[:, :_COST_SIZE] = True
    return mask.ravel()


def _group_totals(R: np.ndarray) -> dict:
    R = np.asarray(R).reshape(-1, RESIDUAL_SIZE)
    return {name: float(np.sum(R[:, sl] ** 2)) for name, sl in _GROUP_SLICES.items()}


def _state_vector(x) -> np.ndarray:
    if isinstance(x, crane.CraneState):
        return x.to_vector()
    return np.asarray(x, dtype=float).reshape(N_STATE)


def stage_cost(x, u, tau, tau_dot, spline: ReferenceSpline, config: MpcConfig,
               params: crane.CraneParams | None = None, edf=None, model: CollisionModel | None = None,
               include_penalties: bool = False) -> float:
    """Five-term stage cost (tracking, damping, velocity, acceleration, progress).

    ``u`` does not enter the cost; it is accepted for interface symmetry.
    With ``include_penalties`` the constraint penalties of the stage are added.
    """
    params = crane.default_params() if params is None else params
    model = CollisionModel.build(params) if model is None else model
    if edf is None:
        from .edf import VoxelGrid

        edf = VoxelEdf.empty(VoxelGrid(np.zeros(3), 1.0, (1, 1, 1)), 2.0)
    ctx = _make_context(params, model, edf, spline, config)
    r = np.asarray(_stage_residual_jit(ctx, jnp.asarray(_state_vector(x)), float(tau), float(tau_dot)))
    if not include_penalties:
        r = r[:_COST_SIZE]
    return float(np.sum(r**2))


def discretize_step(params: crane.CraneParams, x, u, T_s: float) -> np.ndarray:
    """One RK4 step of length ``T_s`` of the continuous crane dynamics."""
    return crane.rk4_step(params, _state_vector(x), u, T_s)


def total_objective(U, tau_dot, x_init, tau_init, spline, edf, params, config: MpcConfig,
                    model: CollisionModel | None = None):
    """Penalized objective and its gradients with respect to ``U`` and ``tau_dot``.

    Returns ``(value, grad_U, grad_tau_dot, penalties)``. Gradients come from
    the Gauss-Newton Jacobian (``2 J^T r``), i.e. forward sensitivity
    propagation through the rollout.
    """
    model = CollisionModel.build(params, edf.grid.resolution if isinstance(edf, VoxelEdf) else 0.1) \
        if model is None else model
    ctx = _make_context(params, model, edf, spline, config)
    U = np.asarray(U, dtype=float).reshape(config.N, N_ACT)
    tau_dot = np.asarray(tau_dot, dtype=float).reshape(config.N)
    z = jnp.asarray(np.concatenate([U.ravel(), tau_dot]))
    r, J, _, _ = _linearize_jit(ctx, z, jnp.asarray(_state_vector(x_init)), float(tau_init))
    r = np.asarray(r)
    grad = 2.0 * np.asarray(J).T @ r
    n_u = config.N * N_ACT
    return float(r @ r), grad[:n_u].reshape(config.N, N_ACT), grad[n_u:], _group_totals(r)


def objective_value(U, tau_dot, x_init, tau_init, spline, edf, params, config: MpcConfig,
                    model: CollisionModel | None = None) -> float:
    model = CollisionModel.build(params, edf.grid.resolution if isinstance(edf, VoxelEdf) else 0.1) \
        if model is None else model
    ctx = _make_context(params, model, edf, spline, config)
    z = np.concatenate([np.asarray(U, dtype=float).ravel(), np.asarray(tau_dot, dtype=float).ravel()])
    R, _, _ = _evaluate_jit(ctx, jnp.asarray(z), jnp.asarray(_state_vector(x_init)), float(tau_init))
    return float(np.sum(np.asarray(R) ** 2))


def shift_warm_start(prev: OcpSolution, config: MpcConfig) -> OcpSolution:
    """Advance a solution by one knot: drop the first, repeat the last."""

    def shift(a):
        a = np.asarray(a)
        return np.concatenate([a[1:], a[-1:]], axis=0)

    tau = np.concatenate([prev.tau[1:], [prev.tau[-1] + prev.tau_dot[-1] * config.T_s]])
    return OcpSolution(X=shift(prev.X), U=shift(prev.U), tau=tau, tau_dot=shift(prev.tau_dot))


def _initial_guess(x0: np.ndarray, config: MpcConfig, params: crane.CraneParams):
    U = np.tile(np.clip(x0[crane.N_JOINTS: crane.N_JOINTS + N_ACT], -params.u_max, params.u_max),
                (config.N, 1))
    return U, np.ones(config.N)


def solve_mpc(x_init, tau_init: float, spline, edf, params: crane.CraneParams, config: MpcConfig,
              warm_start: OcpSolution | None = None, model: CollisionModel | None = None) -> OcpSolution:
    """Solve the penalized OCP from ``x_init`` and progress ``tau_init``.

    The best iterate is returned when the iteration cap or the wall-clock
    budget is reached; an iteration is only started if the running estimate
    of its duration still fits into the budget. Controls stay within
    ``+-u_max`` and ``tau_dot`` within its bounds.
    """
    start = time.perf_counter()
    x0 = _state_vector(x_init)
    if not np.all(np.isfinite(x0)) or not np.isfinite(tau_init):
        raise SolverError("non-finite initial state")
    if model is None:
        model = CollisionModel.build(params, edf.grid.resolution if isinstance(edf, VoxelEdf) else 0.1)
    ctx = _make_context(params, model, edf, spline, config)
    N = config.N
    n_u = N * N_ACT
    lower = np.concatenate([np.tile(-params.u_max, N), np.full(N, config.tau_dot_min)])
    upper = np.concatenate([np.tile(params.u_max, N), np.full(N, config.tau_dot_max)])

    if warm_start is not None:
        U0, td0 = np.asarray(warm_start.U, dtype=float), np.asarray(warm_start.tau_dot, dtype=float)
        if U0.shape != (N, N_ACT) or td0.shape != (N,):
            raise ValueError("warm start does not match the horizon")
    else:
        U0, td0 = _initial_guess(x0, config, params)
    z = np.clip(np.concatenate([U0.ravel(), td0]), lower, upper)
    z = np.where(np.isfinite(z), z, 0.0)

    x0j = jnp.asarray(x0)
    tau0 = float(tau_init)
    t_lin = time.perf_counter()
    r, J, X, taus = (np.asarray(a) for a in _linearize_jit(ctx, jnp.asarray(z), x0j, tau0))
    f = float(r @ r)
    if not np.isfinite(f):
        raise SolverError("objective is not finite at the initial guess")

    # an iteration costs one linearization plus the step solve
    lin_cost = time.perf_counter() - t_lin
    estimate = 1.6 * lin_cost
    # keep a little time for packing the result
    budget = None if config.time_budget_ms is None else 0.95 * config.time_budget_ms / 1000.0
    iterations = 0
    converged = False
    lam = config.lm_damping
    fractions = [float(a) for a in config.step_fractions]

    def out_of_time(cost):
        return budget is not None and time.perf_counter() - start + cost > budget

    while iterations < config.max_iterations:
        if out_of_time(estimate + (lin_cost if J is None else 0.0)):
            break
        t_iter = time.perf_counter()
        iterations += 1
        if J is None:
            r, J, X, taus = (np.asarray(a) for a in _linearize_jit(ctx, jnp.asarray(z), x0j, tau0))
        g = J.T @ r
        # variables pinned at a bound with the gradient pushing outward stay fixed
        free = ~(((z <= lower + 1e-12) & (g > 0)) | ((z >= upper - 1e-12) & (g < 0)))
        # inactive penalty rows have zero residual and zero Jacobian
        rows = _cost_rows(N) | (r != 0.0)
        Jf = J[np.ix_(rows, free)]
        H = Jf.T @ Jf
        H[np.diag_indices_from(H)] += lam * (1.0 + np.diag(H))
        step = np.zeros_like(z)
        try:
            step[free] = -np.linalg.solve(H, g[free])
        except np.linalg.LinAlgError:
            step[free] = -g[free]

        def acceptable(value, trial):
            return np.isfinite(value) and value <= f and value <= f + config.armijo_c * 2.0 * g @ (trial - z)

        trial = np.clip(z + fractions[0] * step, lower, upper)
        r_t, J_t, X_t, taus_t = (np.asarray(a) for a in _linearize_jit(ctx, jnp.asarray(trial), x0j, tau0))
        value = float(r_t @ r_t)
        accepted = acceptable(value, trial)
        if not accepted:
            J_t = None
            t_eval = time.perf_counter()
            cost = 0.3 * estimate
            for frac in fractions[1:]:
                if out_of_time(cost):
                    break
                trial = np.clip(z + frac * step, lower, upper)
                R_t, X_t, taus_t = (np.asarray(a) for a in _evaluate_jit(ctx, jnp.asarray(trial), x0j, tau0))
                r_t = R_t.reshape(-1)
                value = float(r_t @ r_t)
                cost = time.perf_counter() - t_eval
                t_eval = time.perf_counter()
                if acceptable(value, trial):
                    accepted = True
                    break
        if not accepted:
            lam = min(lam * 10.0, 1e6)
            if lam >= 1e6:
                converged = True
                break
            continue
        improvement = f - value
        z, r, J, X, taus, f = trial, r_t, J_t, X_t, taus_t, value
        lam = max(lam * 0.3, 1e-9)
        estimate = max(0.5 * estimate, time.perf_counter() - t_iter)
        if improvement <= config.tolerance * max(1.0, f):
            converged = True
            break

    U, tau_dot = z[:n_u].reshape(N, N_ACT), z[n_u:]
    return OcpSolution(
        X=X,
        U=U,
        tau=taus,
        tau_dot=tau_dot,
        objective=f,
        penalties=_group_totals(r),
        iterations=iterations,
        wall_time=time.perf_counter() - start,
        converged=converged,
    )


class SwayDampingMPC:
    """Receding-horizon controller keeping its own warm start.

    Parameters
    ----------
    params : CraneParams
    config : MpcConfig
    spline : ReferenceSpline
        Actuated-joint reference ``q_d(tau)``.
    model : CollisionModel, optional
        Sphere model; built from ``params`` and the map resolution if omitted.
    """

    def __init__(self, params: crane.CraneParams, config: MpcConfig, spline: ReferenceSpline,
                 model: CollisionModel | None = None):
        self.params = params
        self.config = config
        self.spline = spline
        self.model = model
        self.last_solution: OcpSolution | None = None

    def reset(self):
        self.last_solution = None

    def warmup(self, state, tau: float, edf) -> None:
        """Compile every solver kernel so later solves are not charged for it."""
        if self.model is None:
            resolution = edf.grid.resolution if isinstance(edf, VoxelEdf) else 0.1
            self.model = CollisionModel.build(self.params, resolution)
        x0 = _state_vector(state)
        ctx = _make_context(self.params, self.model, edf, self.spline, self.config)
        U, td = _initial_guess(x0, self.config, self.params)
        z = jnp.asarray(np.concatenate([U.ravel(), td]))
        jax.block_until_ready(_linearize_jit(ctx, z, jnp.asarray(x0), float(tau)))
        jax.block_until_ready(_evaluate_jit(ctx, z, jnp.asarray(x0), float(tau)))

    def solve(self, state, tau: float, edf) -> OcpSolution:
        warm = None
        if self.last_solution is not None:
            warm = shift_warm_start(self.last_solution, self.config)
        if self.model is None:
            resolution = edf.grid.resolution if isinstance(edf, VoxelEdf) else 0.1
            self.model = CollisionModel.build(self.params, resolution)
        sol = solve_mpc(state, tau, self.spline, edf, self.params, self.config, warm, self.model)
        self.last_solution = sol
        return sol
