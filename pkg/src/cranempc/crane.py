"""Kinematics and dynamics of the 7-joint forestry crane.

Joints 1-5 are hydraulically actuated (slew, inner boom, outer boom,
telescope, rotator) and follow a second-order velocity model. Joints 6-7
are the passive pendulum axes carrying the gripper; their motion follows
from the manipulator equations through inertial coupling.

Rigid-body quantities are computed with spatial vectors expressed in world
coordinates at the world origin, which keeps the composite-rigid-body and
Newton-Euler recursions free of frame transforms. Everything in the
``_``-prefixed core is ``jax.numpy`` so the MPC can jit and differentiate
through it; the public functions take and return numpy arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

N_JOINTS = 7
N_ACT = 5
N_PAS = 2
N_STATE = 2 * N_JOINTS + N_ACT

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


class InvalidParamsError(ValueError):
    """Raised when crane parameters violate a physical invariant."""


def _concrete(x) -> bool:
    # pytree unflattening inside transformations passes tracers or placeholders
    return isinstance(x, (np.ndarray, list, tuple, int, float, np.number))


_ARRAY_SHAPES = {
    "joint_axes": (N_JOINTS, 3),
    "joint_offsets": (N_JOINTS, 4, 4),
    "link_mass": (N_JOINTS,),
    "link_com": (N_JOINTS, 3),
    "link_inertia": (N_JOINTS, 3, 3),
    "gravity": (3,),
    "actuator_omega": (N_ACT,),
    "actuator_damping": (N_ACT,),
    "cylinder_area_pos": (N_ACT,),
    "cylinder_area_neg": (N_ACT,),
    "cylinder_gain": (N_ACT,),
    "q_min": (N_JOINTS,),
    "q_max": (N_JOINTS,),
    "qddA_min": (N_ACT,),
    "qddA_max": (N_ACT,),
    "u_max": (N_ACT,),
    "Q_max": (),
    "passive_damping": (N_PAS,),
}


@dataclass(frozen=True)
class CraneParams:
    """Kinematic, inertial, actuator and hydraulic parameters.

    ``joint_offsets[i]`` is the homogeneous transform from the frame of link
    ``i-1`` (world for the first joint) to joint ``i`` at zero displacement.
    Link centers of mass and inertia tensors (about the COM) are expressed in
    the link frame. Angles are in rad, the telescope in m.
    """

    joint_types: tuple = field(metadata={"static": True})
    joint_axes: np.ndarray
    joint_offsets: np.ndarray
    link_mass: np.ndarray
    link_com: np.ndarray
    link_inertia: np.ndarray
    gravity: np.ndarray
    actuator_omega: np.ndarray
    actuator_damping: np.ndarray
    cylinder_area_pos: np.ndarray
    cylinder_area_neg: np.ndarray
    cylinder_gain: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    qddA_min: np.ndarray
    qddA_max: np.ndarray
    u_max: np.ndarray
    Q_max: float
    passive_damping: np.ndarray
    telescope_index: int = field(default=3, metadata={"static": True})

    def __post_init__(self):
        if not all(_concrete(getattr(self, name)) for name in _ARRAY_SHAPES):
            return  # traced copy inside jit; validated when first built
        for name, shape in _ARRAY_SHAPES.items():
            value = np.asarray(getattr(self, name), dtype=float)
            if name == "passive_damping" and value.ndim == 0:
                value = np.full(N_PAS, float(value))
            if value.shape != shape:
                raise InvalidParamsError(f"{name}: expected shape {shape}, got {value.shape}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "joint_types", tuple(self.joint_types))
        self._validate()

    def _validate(self):
        if len(self.joint_types) != N_JOINTS:
            raise InvalidParamsError("joint_types must list 7 joints")
        for kind in self.joint_types:
            if kind not in (REVOLUTE, PRISMATIC):
                raise InvalidParamsError(f"unknown joint type {kind!r}")
        if self.joint_types[self.telescope_index] != PRISMATIC:
            raise InvalidParamsError("telescope_index must point at a prismatic joint")
        if any(kind != REVOLUTE for kind in self.joint_types[N_ACT:]):
            raise InvalidParamsError("pendulum joints must be revolute")
        norms = np.linalg.norm(self.joint_axes, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise InvalidParamsError("joint axes must be unit vectors")
        if np.any(self.link_mass <= 0):
            raise InvalidParamsError("all link masses must be positive")
        for i, inertia in enumerate(self.link_inertia):
            if not np.allclose(inertia, inertia.T, atol=1e-12):
                raise InvalidParamsError(f"inertia of link {i + 1} is not symmetric")
            if np.linalg.eigvalsh(inertia).min() <= 0:
                raise InvalidParamsError(f"inertia of link {i + 1} is not positive definite")
        if np.any(self.q_min >= self.q_max):
            raise InvalidParamsError("q_min must be below q_max")
        if np.any(self.qddA_min >= 0) or np.any(self.qddA_max <= 0):
            raise InvalidParamsError("acceleration limits must bracket zero")
        if np.any(self.actuator_omega <= 0) or np.any(self.actuator_damping <= 0):
            raise InvalidParamsError("actuator omega and damping must be positive")
        for name in ("cylinder_area_pos", "cylinder_area_neg", "cylinder_gain", "u_max"):
            if np.any(getattr(self, name) <= 0):
                raise InvalidParamsError(f"{name} must be positive")
        if self.Q_max <= 0:
            raise InvalidParamsError("Q_max must be positive")
        if np.any(self.passive_damping < 0):
            raise InvalidParamsError("passive_damping must be non-negative")

    def replace(self, **changes) -> "CraneParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif isinstance(value, tuple):
                value = list(value)
            elif isinstance(value, (np.floating, np.integer)):
                value = value.item()
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict, base: "CraneParams | None" = None) -> "CraneParams":
        """Build params from a (possibly partial) mapping layered over ``base``."""
        base = default_params() if base is None else base
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidParamsError(f"unknown crane parameter(s): {sorted(unknown)}")
        return dataclasses.replace(base, **data)


jax.tree_util.register_dataclass(
    CraneParams,
    data_fields=list(_ARRAY_SHAPES),
    meta_fields=["joint_types", "telescope_index"],
)


def _translation(x, y, z):
    T = np.eye(4)
    T[:3, 3] = (x, y, z)
    return T


def _box_inertia(mass, lx, ly, lz):
    return mass / 12.0 * np.diag([ly**2 + lz**2, lx**2 + lz**2, lx**2 + ly**2])


def default_params(**overrides) -> CraneParams:
    """Forwarder-scale default crane.

    Slew column 2.5 m, inner boom 4.0 m, outer boom 3.0 m with a 0-2.5 m
    telescope, rotator about the arm axis, a universal-joint pendulum at the
    arm tip and a 180 kg gripper whose center of mass hangs 0.6 m below it.
    """
    y_down = (0.0, -1.0, 0.0)
    params = dict(
        joint_types=(REVOLUTE, REVOLUTE, REVOLUTE, PRISMATIC, REVOLUTE, REVOLUTE, REVOLUTE),
        joint_axes=np.array([
            (0.0, 0.0, 1.0),  # slew
            y_down,  # inner boom, positive raises
            y_down,  # outer boom
            (1.0, 0.0, 0.0),  # telescope
            (1.0, 0.0, 0.0),  # rotator
            (0.0, 1.0, 0.0),  # pendulum, swings in the arm plane
            (1.0, 0.0, 0.0),  # pendulum, swings sideways
        ]),
        joint_offsets=np.stack([
            _translation(0.0, 0.0, 0.0),
            _translation(0.0, 0.0, 2.5),
            _translation(4.0, 0.0, 0.0),
            _translation(3.0, 0.0, 0.0),
            _translation(0.0, 0.0, 0.0),
            _translation(0.0, 0.0, 0.0),
            _translation(0.0, 0.0, 0.0),
        ]),
        link_mass=np.array([400.0, 300.0, 200.0, 100.0, 20.0, 10.0, 180.0]),
        link_com=np.array([
            (0.0, 0.0, 1.25),
            (2.0, 0.0, 0.0),
            (1.5, 0.0, 0.0),
            (-1.0, 0.0, 0.0),
            (0.0, 0.0, -0.05),
            (0.0, 0.0, -0.05),
            (0.0, 0.0, -0.6),
        ]),
        link_inertia=np.stack([
            _box_inertia(400.0, 0.5, 0.5, 2.5),
            _box_inertia(300.0, 4.0, 0.3, 0.4),
            _box_inertia(200.0, 3.0, 0.25, 0.3),
            _box_inertia(100.0, 2.5, 0.2, 0.2),
            _box_inertia(20.0, 0.2, 0.2, 0.2),
            _box_inertia(10.0, 0.1, 0.1, 0.1),
            _box_inertia(180.0, 0.8, 0.5, 0.6),
        ]),
        gravity=np.array([0.0, 0.0, -9.81]),
        actuator_omega=np.full(N_ACT, 6.0),
        actuator_damping=np.full(N_ACT, 0.9),
        cylinder_area_pos=np.array([0.008, 0.0126, 0.0095, 0.005, 0.002]),
        cylinder_area_neg=np.array([0.008, 0.0075, 0.0057, 0.003, 0.002]),
        cylinder_gain=np.array([0.15, 0.35, 0.3, 1.0, 0.05]),
        q_min=np.array([-2.4, -0.4, -2.6, 0.0, -np.pi, -1.2, -1.2]),
        q_max=np.array([2.4, 1.2, 0.5, 2.5, np.pi, 1.2, 1.2]),
        qddA_min=-np.array([1.0, 0.8, 0.8, 1.0, 2.0]),
        qddA_max=np.array([1.0, 0.8, 0.8, 1.0, 2.0]),
        u_max=np.array([0.5, 0.3, 0.3, 0.5, 1.0]),
        Q_max=0.004,
        passive_damping=np.full(N_PAS, 0.02),
        telescope_index=3,
    )
    params.update(overrides)
    return CraneParams(**params)


@dataclass
class CraneState:
    """Plant state: positions ``q`` (7), velocities ``qd`` (7) and actuated
    accelerations ``qddA`` (5)."""

    q: np.ndarray
    qd: np.ndarray
    qddA: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(N_JOINTS)
        self.qd = np.asarray(self.qd, dtype=float).reshape(N_JOINTS)
        self.qddA = np.asarray(self.qddA, dtype=float).reshape(N_ACT)
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))
                and np.all(np.isfinite(self.qddA))):
            raise ValueError("CraneState entries must be finite")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd, self.qddA])

    @classmethod
    def from_vector(cls, x) -> "CraneState":
        x = np.asarray(x, dtype=float)
        return cls(x[:N_JOINTS], x[N_JOINTS:2 * N_JOINTS], x[2 * N_JOINTS:])

    @classmethod
    def at_rest(cls, q) -> "CraneState":
        return cls(q, np.zeros(N_JOINTS), np.zeros(N_ACT))


# ---------------------------------------------------------------- spatial algebra


def _skew(v):
    return jnp.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _rotation(axis, angle):
    K = _skew(axis)
    return jnp.eye(3) + jnp.sin(angle) * K + (1.0 - jnp.cos(angle)) * (K @ K)


def _cross_motion(v, m):
    w, vo = v[:3], v[3:]
    return jnp.concatenate([jnp.cross(w, m[:3]), jnp.cross(w, m[3:]) + jnp.cross(vo, m[:3])])


def _cross_force(v, f):
    w, vo = v[:3], v[3:]
    return jnp.concatenate([jnp.cross(w, f[:3]) + jnp.cross(vo, f[3:]), jnp.cross(w, f[3:])])


def _fk(params: CraneParams, q):
    """World poses ``(R_i, p_i)`` of the 7 link frames."""
    R = jnp.eye(3)
    p = jnp.zeros(3)
    Rs, ps = [], []
    for i, kind in enumerate(params.joint_types):
        off = params.joint_offsets[i]
        p = p + R @ off[:3, 3]
        R = R @ off[:3, :3]
        axis = params.joint_axes[i]
        if kind == REVOLUTE:
            R = R @ _rotation(axis, q[i])
        else:
            p = p + R @ (axis * q[i])
        Rs.append(R)
        ps.append(p)
    return Rs, ps


def _motion_subspaces(params: CraneParams, Rs, ps):
    S = []
    for i, kind in enumerate(params.joint_types):
        z = Rs[i] @ params.joint_axes[i]
        if kind == REVOLUTE:
            S.append(jnp.concatenate([z, jnp.cross(ps[i], z)]))
        else:
            S.append(jnp.concatenate([jnp.zeros(3), z]))
    return S


def _spatial_inertia(params: CraneParams, R, p, i):
    m = params.link_mass[i]
    c = p + R @ params.link_com[i]
    Ic = R @ params.link_inertia[i] @ R.T
    C = _skew(c)
    top = jnp.concatenate([Ic + m * C @ C.T, m * C], axis=1)
    bottom = jnp.concatenate([m * C.T, m * jnp.eye(3)], axis=1)
    return jnp.concatenate([top, bottom], axis=0)


def _spatial_inertias(params: CraneParams, Rs, ps, first_body=0):
    """World-frame spatial inertias; entries before ``first_body`` are ``None``."""
    return [None if i < first_body else _spatial_inertia(params, Rs[i], ps[i], i)
            for i in range(N_JOINTS)]


def _crba(params: CraneParams, q):
    Rs, ps = _fk(params, q)
    S = _motion_subspaces(params, Rs, ps)
    inertias = _spatial_inertias(params, Rs, ps)
    composite = [None] * N_JOINTS
    acc = jnp.zeros((6, 6))
    for i in reversed(range(N_JOINTS)):
        acc = acc + inertias[i]
        composite[i] = acc
    rows = []
    for i in range(N_JOINTS):
        rows.append(jnp.stack([S[i] @ composite[max(i, j)] @ S[j] for j in range(N_JOINTS)]))
    return jnp.stack(rows)


def _rnea(params: CraneParams, q, qd, qdd, gravity=None, first_body=0):
    """Joint forces for the given motion (Newton-Euler, world coordinates).

    Bodies before ``first_body`` are skipped in the force pass, which is
    exact for the rows ``>= first_body``.
    """
    Rs, ps = _fk(params, q)
    S = _motion_subspaces(params, Rs, ps)
    inertias = _spatial_inertias(params, Rs, ps, first_body)
    return _rnea_spatial(params, S, inertias, qd, qdd, gravity, first_body)


def _rnea_spatial(params, S, inertias, qd, qdd, gravity=None, first_body=0):
    gravity = params.gravity if gravity is None else gravity
    v = jnp.zeros(6)
    a = jnp.concatenate([jnp.zeros(3), -gravity])
    forces = []
    for i in range(N_JOINTS):
        vj = S[i] * qd[i]
        v = v + vj
        a = a + S[i] * qdd[i] + _cross_motion(v, vj)
        if i >= first_body:
            forces.append(inertias[i] @ a + _cross_force(v, inertias[i] @ v))
    tau = []
    f = jnp.zeros(6)
    for i in reversed(range(first_body, N_JOINTS)):
        f = f + forces[i - first_body]
        tau.append(S[i] @ f)
    return jnp.stack(tau[::-1])


def _passive_accel(params: CraneParams, q, qd, qddA):
    Rs, ps = _fk(params, q)
    S = _motion_subspaces(params, Rs, ps)
    inertias = _spatial_inertias(params, Rs, ps, N_ACT)
    qdd = jnp.concatenate([qddA, jnp.zeros(N_PAS)])
    # passive rows of inverse dynamics at qdd_P = 0 equal D_M qddA + C_P qd + g_P
    tau_p = _rnea_spatial(params, S, inertias, qd, qdd, first_body=N_ACT)
    tau_p = tau_p + params.passive_damping * qd[N_ACT:]
    (a, b), (c, d) = _passive_block_spatial(S, inertias)
    det = a * d - b * c
    return -jnp.stack([d * tau_p[0] - b * tau_p[1], a * tau_p[1] - c * tau_p[0]]) / det


def _passive_block_spatial(S, inertias):
    I7 = inertias[6]
    I6 = inertias[5] + I7
    off = S[5] @ I7 @ S[6]
    return (S[5] @ I6 @ S[5], off), (off, S[6] @ I7 @ S[6])


def _passive_block(params: CraneParams, q):
    Rs, ps = _fk(params, q)
    S = _motion_subspaces(params, Rs, ps)
    rows = _passive_block_spatial(S, _spatial_inertias(params, Rs, ps, N_ACT))
    return jnp.array(rows)


def _actuator_jerk(params: CraneParams, qdA, qddA, u):
    w = params.actuator_omega
    return w**2 * (u - qdA) - 2.0 * params.actuator_damping * w * qddA


def _state_derivative(params: CraneParams, x, u):
    q = x[:N_JOINTS]
    qd = x[N_JOINTS:2 * N_JOINTS]
    qddA = x[2 * N_JOINTS:]
    qddP = _passive_accel(params, q, qd, qddA)
    jerk = _actuator_jerk(params, qd[:N_ACT], qddA, u)
    return jnp.concatenate([qd, qddA, qddP, jerk])


def _rk4(params: CraneParams, x, u, dt):
    k1 = _state_derivative(params, x, u)
    k2 = _state_derivative(params, x + 0.5 * dt * k1, u)
    k3 = _state_derivative(params, x + 0.5 * dt * k2, u)
    k4 = _state_derivative(params, x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _pump_flow(params: CraneParams, qdA):
    rate = params.cylinder_gain * qdA
    area = jnp.where(rate >= 0.0, params.cylinder_area_pos, params.cylinder_area_neg)
    return jnp.sum(area * jnp.abs(rate))


def _energy(params: CraneParams, q, qd):
    D = _crba(params, q)
    Rs, ps = _fk(params, q)
    potential = 0.0
    for i in range(N_JOINTS):
        c = ps[i] + Rs[i] @ params.link_com[i]
        potential = potential - params.link_mass[i] * (params.gravity @ c)
    return 0.5 * qd @ D @ qd + potential


# ---------------------------------------------------------------- public API

_fk_jit = jax.jit(_fk)
_crba_jit = jax.jit(_crba)
_rnea_jit = jax.jit(_rnea)
_passive_accel_jit = jax.jit(_passive_accel)
_passive_block_jit = jax.jit(_passive_block)
_state_derivative_jit = jax.jit(_state_derivative)
_rk4_jit = jax.jit(_rk4)
_energy_jit = jax.jit(_energy)


def _vec(x, n):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"expected a {n}-vector, got shape {x.shape}")
    return x


def forward_kinematics(params: CraneParams, q) -> list[np.ndarray]:
    """World poses of the 7 link frames as 4x4 homogeneous transforms."""
    Rs, ps = _fk_jit(params, _vec(q, N_JOINTS))
    poses = []
    for R, p in zip(Rs, ps):
        T = np.eye(4)
        T[:3, :3] = np.asarray(R)
        T[:3, 3] = np.asarray(p)
        poses.append(T)
    return poses


def point_jacobian(params: CraneParams, q, link: int, local_point=(0.0, 0.0, 0.0)) -> np.ndarray:
    """3x7 position Jacobian of a point fixed in ``link`` (0-based)."""
    local_point = jnp.asarray(local_point, dtype=float)

    def position(qq):
        Rs, ps = _fk(params, qq)
        return ps[link] + Rs[link] @ local_point

    return np.asarray(jax.jacfwd(position)(jnp.asarray(_vec(q, N_JOINTS))))


def mass_matrix(params: CraneParams, q):
    """Joint-space inertia matrix ``D`` with its passive-row blocks.

    Returns ``(D, D_M, D_P)`` where ``D_M = D[5:, :5]`` couples actuated
    accelerations into the pendulum rows and ``D_P = D[5:, 5:]``.
    """
    D = np.asarray(_crba_jit(params, _vec(q, N_JOINTS)))
    return D, D[N_ACT:, :N_ACT], D[N_ACT:, N_ACT:]


def inverse_dynamics(params: CraneParams, q, qd, qdd, gravity=None) -> np.ndarray:
    """Generalized forces for all 7 joints (recursive Newton-Euler)."""
    g = params.gravity if gravity is None else np.asarray(gravity, dtype=float)
    return np.asarray(_rnea_jit(params, _vec(q, N_JOINTS), _vec(qd, N_JOINTS),
                                _vec(qdd, N_JOINTS), g))


def bias_forces(params: CraneParams, q, qd) -> np.ndarray:
    """Passive-row bias ``C_P(q, qd) qd + g_P(q)`` (excludes viscous damping)."""
    tau = inverse_dynamics(params, q, qd, np.zeros(N_JOINTS))
    return tau[N_ACT:]


def gravity_forces(params: CraneParams, q) -> np.ndarray:
    return inverse_dynamics(params, q, np.zeros(N_JOINTS), np.zeros(N_JOINTS))


def pendulum_accel(params: CraneParams, q, qd, qddA) -> np.ndarray:
    """Pendulum accelerations from the passive rows of the manipulator equation.

    With ``passive_damping`` zero this is exactly
    ``-D_P^{-1} (D_M qddA + C_P qd + g_P)``; otherwise the viscous torque
    ``c * qd_P`` is added inside the bracket.
    """
    q = _vec(q, N_JOINTS)
    DP = np.asarray(_passive_block_jit(params, q))
    if np.linalg.cond(DP) > 1e8:
        raise InvalidParamsError("pendulum inertia block is near singular")
    return np.asarray(_passive_accel_jit(params, q, _vec(qd, N_JOINTS), _vec(qddA, N_ACT)))


def actuator_jerk(params: CraneParams, qdA, qddA, u) -> np.ndarray:
    """Third derivative of the actuated joints under the second-order velocity model."""
    return np.asarray(_actuator_jerk(params, _vec(qdA, N_ACT), _vec(qddA, N_ACT), _vec(u, N_ACT)))


def state_derivative(params: CraneParams, x, u) -> np.ndarray:
    if isinstance(x, CraneState):
        x = x.to_vector()
    return np.asarray(_state_derivative_jit(params, _vec(x, N_STATE), _vec(u, N_ACT)))


def rk4_step(params: CraneParams, x, u, dt: float) -> np.ndarray:
    if isinstance(x, CraneState):
        x = x.to_vector()
    return np.asarray(_rk4_jit(params, _vec(x, N_STATE), _vec(u, N_ACT), float(dt)))


def pump_flow(params: CraneParams, qA, qdA) -> float:
    """Total pump flow in m^3/s demanded by the five cylinders.

    Cylinder rates are an affine lever of the joint rates, so ``qA`` does
    not enter; it is accepted to keep the signature geometry-ready.
    """
    _vec(qA, N_ACT)
    return float(_pump_flow(params, _vec(qdA, N_ACT)))


def mechanical_energy(params: CraneParams, q, qd) -> float:
    return float(_energy_jit(params, _vec(q, N_JOINTS), _vec(qd, N_JOINTS)))


def hanging_equilibrium(params: CraneParams, qA) -> np.ndarray:
    """Full configuration with the pendulum hanging along gravity.

    Assumes the default pendulum arrangement (joint 6 about local y, joint 7
    about local x, gripper along local -z).
    """
    qA = _vec(qA, N_ACT)
    q = np.concatenate([qA, np.zeros(N_PAS)])
    Rs, _ = _fk_jit(params, q)
    R_tip = np.asarray(Rs[N_ACT - 1])
    down = params.gravity / np.linalg.norm(params.gravity)
    g = R_tip.T @ down
    q7 = np.arcsin(np.clip(g[1], -1.0, 1.0))
    q6 = np.arctan2(-g[0], -g[2])
    q[N_ACT:] = (q6, q7)
    return q
