"""YAML scenario files.

One scenario per file with the sections ``crane``, ``mpc``, ``reference``,
``environment``, ``disturbances``, ``initial_state`` and ``run``. Every key
is checked; unknown keys and malformed values are reported with the line
they appear on. Units are SI (m, s, rad, m^3/s). See the README for the
full field list.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import yaml

from . import crane
from .collision import CollisionModel, _link_spheres
from .crane import CraneParams, CraneState, InvalidParamsError, N_ACT, N_JOINTS
from .mpc import MpcConfig
from .sim import Disturbance, ObstacleEvent, ScenarioSpec

SECTIONS = ("name", "description", "crane", "mpc", "reference", "environment", "disturbances",
            "initial_state", "run")
REFERENCE_KEYS = ("waypoints", "speed")
ENVIRONMENT_KEYS = ("lower", "upper", "resolution", "d_max", "obstacles")
OBSTACLE_KEYS = ("min", "max", "insert", "remove")
DISTURBANCE_KEYS = ("time", "impulse")
STATE_KEYS = ("q", "qd", "qddA")
RUN_KEYS = ("duration", "plant_dt", "control_period", "goal_tolerance", "controller",
            "expect_collision", "runtime_budget_s", "seed")
COVERAGE_SAMPLES = 4000


class ScenarioError(ValueError):
    """A scenario file could not be turned into a valid scenario."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


@dataclass
class ScenarioFile:
    """A parsed scenario plus run settings that are not part of the simulation."""

    spec: ScenarioSpec
    seed: int
    path: Path | None = None


def _plain(node, lines, path=""):
    """Convert a YAML node tree to Python values, recording each key's line."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            sub = f"{path}.{key}" if path else key
            lines[sub] = key_node.start_mark.line + 1
            out[key] = _plain(value_node, lines, sub)
        return out
    if isinstance(node, yaml.SequenceNode):
        out = []
        for i, item in enumerate(node.value):
            sub = f"{path}[{i}]"
            lines[sub] = item.start_mark.line + 1
            out.append(_plain(item, lines, sub))
        return out
    return yaml.safe_load(yaml.serialize(node))


class _Reader:
    def __init__(self, lines, source):
        self.lines = lines
        self.source = source
        self.diagnostics = []

    def error(self, path, message):
        line = self.lines.get(path)
        where = f"{self.source}:{line}" if line else self.source
        self.diagnostics.append(f"{where}: {path}: {message}")

    def mapping(self, data, path, allowed):
        if data is None:
            return {}
        if not isinstance(data, dict):
            self.error(path, "expected a mapping")
            return {}
        for key in data:
            if key not in allowed:
                sub = f"{path}.{key}" if path else key
                self.error(sub, "unknown key")
        return {k: v for k, v in data.items() if k in allowed}

    def number(self, data, path, default=None, integer=False):
        if data is None:
            return default
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            self.error(path, "expected a number")
            return default
        if integer and int(data) != data:
            self.error(path, "expected an integer")
            return default
        return int(data) if integer else float(data)

    def vector(self, data, path, size=None, default=None):
        if data is None:
            return default
        try:
            value = np.asarray(data, dtype=float)
        except (TypeError, ValueError):
            self.error(path, "expected a list of numbers")
            return default
        if size is not None and value.shape != (size,):
            self.error(path, f"expected {size} values")
            return default
        if not np.all(np.isfinite(value)):
            self.error(path, "values must be finite")
            return default
        return value

    def flag(self, data, path, default):
        if data is None:
            return default
        if not isinstance(data, bool):
            self.error(path, "expected true or false")
            return default
        return data


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioFile:
    """Parse scenario YAML; raises :class:`ScenarioError` listing every problem."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ScenarioError([f"{where}: parse error: {getattr(exc, 'problem', exc)}"]) from None
    lines: dict = {}
    data = _plain(root, lines) if root is not None else {}
    r = _Reader(lines, source)
    top = r.mapping(data, "", SECTIONS)

    name = top.get("name")
    if not isinstance(name, str) or not name:
        r.error("name", "a non-empty scenario name is required")
        name = "unnamed"

    params = crane.default_params()
    crane_data = r.mapping(top.get("crane"), "crane", tuple(CraneParams.__dataclass_fields__))
    try:
        params = CraneParams.from_dict(crane_data, params)
    except (InvalidParamsError, ValueError, TypeError) as exc:
        path = "crane"
        for key in crane_data:
            if key in str(exc):
                path = f"crane.{key}"
                break
        r.error(path, str(exc))

    try:
        config = MpcConfig.from_dict(r.mapping(top.get("mpc"), "mpc", _mpc_keys()))
    except (ValueError, TypeError) as exc:
        r.error("mpc", str(exc))
        config = MpcConfig()

    ref = r.mapping(top.get("reference"), "reference", REFERENCE_KEYS)
    waypoints = ref.get("waypoints")
    if waypoints is None:
        r.error("reference.waypoints", "at least one waypoint is required")
        waypoints = [np.zeros(N_ACT)]
    elif not isinstance(waypoints, list) or not waypoints:
        r.error("reference.waypoints", "expected a non-empty list of waypoints")
        waypoints = [np.zeros(N_ACT)]
    else:
        waypoints = [r.vector(wp, f"reference.waypoints[{i}]", N_ACT, np.zeros(N_ACT))
                     for i, wp in enumerate(waypoints)]
    speed = r.number(ref.get("speed"), "reference.speed", 0.5)

    env = r.mapping(top.get("environment"), "environment", ENVIRONMENT_KEYS)
    defaults = ScenarioSpec.__dataclass_fields__
    lower = r.vector(env.get("lower"), "environment.lower", 3, defaults["grid_lower"].default_factory())
    upper = r.vector(env.get("upper"), "environment.upper", 3, defaults["grid_upper"].default_factory())
    resolution = r.number(env.get("resolution"), "environment.resolution", 0.1)
    d_max = r.number(env.get("d_max"), "environment.d_max", 2.0)
    obstacles = []
    raw_obstacles = env.get("obstacles") or []
    if not isinstance(raw_obstacles, list):
        r.error("environment.obstacles", "expected a list")
        raw_obstacles = []
    for i, item in enumerate(raw_obstacles):
        path = f"environment.obstacles[{i}]"
        ob = r.mapping(item, path, OBSTACLE_KEYS)
        lo = r.vector(ob.get("min"), f"{path}.min", 3)
        hi = r.vector(ob.get("max"), f"{path}.max", 3)
        if lo is None or hi is None:
            r.error(path, "min and max corners are required")
            continue
        remove = ob.get("remove")
        obstacles.append(ObstacleEvent(lo, hi, r.number(ob.get("insert"), f"{path}.insert", 0.0),
                                       None if remove is None else r.number(remove, f"{path}.remove")))

    disturbances = []
    raw_dist = top.get("disturbances") or []
    if not isinstance(raw_dist, list):
        r.error("disturbances", "expected a list")
        raw_dist = []
    for i, item in enumerate(raw_dist):
        path = f"disturbances[{i}]"
        ev = r.mapping(item, path, DISTURBANCE_KEYS)
        t = r.number(ev.get("time"), f"{path}.time")
        impulse = r.vector(ev.get("impulse"), f"{path}.impulse", 2)
        if t is None or impulse is None:
            r.error(path, "time and impulse are required")
            continue
        disturbances.append(Disturbance(t, impulse))

    initial = None
    if top.get("initial_state") is not None:
        st = r.mapping(top.get("initial_state"), "initial_state", STATE_KEYS)
        q = r.vector(st.get("q"), "initial_state.q", N_JOINTS)
        if q is None:
            r.error("initial_state.q", "7 joint positions are required")
        else:
            initial = CraneState(q, r.vector(st.get("qd"), "initial_state.qd", N_JOINTS, np.zeros(N_JOINTS)),
                                 r.vector(st.get("qddA"), "initial_state.qddA", N_ACT, np.zeros(N_ACT)))

    run = r.mapping(top.get("run"), "run", RUN_KEYS)
    duration = r.number(run.get("duration"), "run.duration")
    if duration is None:
        r.error("run.duration", "a run duration is required")
        duration = 1.0
    seed = r.number(run.get("seed"), "run.seed", 0, integer=True)
    budget = run.get("runtime_budget_s")

    spec = ScenarioSpec(
        name=name,
        params=params,
        waypoints=np.asarray(waypoints),
        duration=duration,
        mpc=config,
        initial_state=initial,
        reference_speed=speed,
        grid_lower=lower,
        grid_upper=upper,
        resolution=resolution,
        d_max=d_max,
        obstacles=obstacles,
        disturbances=disturbances,
        controller=run.get("controller", "mpc"),
        plant_dt=r.number(run.get("plant_dt"), "run.plant_dt", 1e-3),
        control_period=r.number(run.get("control_period"), "run.control_period", 0.1),
        goal_tolerance=r.number(run.get("goal_tolerance"), "run.goal_tolerance", 0.05),
        expect_collision=r.flag(run.get("expect_collision"), "run.expect_collision", False),
        runtime_budget_s=None if budget is None else r.number(budget, "run.runtime_budget_s"),
        description=str(top.get("description") or ""),
    )
    for problem in spec.problems():
        path, _, message = problem.partition(": ")
        r.error(path, message)
    if r.diagnostics:
        raise ScenarioError(r.diagnostics)
    return ScenarioFile(spec, seed)


def _mpc_keys():
    return tuple(MpcConfig.__dataclass_fields__)


def load_scenario(path) -> ScenarioFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([f"{path}: cannot read file: {exc.strerror}"]) from None
    parsed = parse_scenario(text, str(path))
    parsed.path = path
    return parsed


def _extents(params, model, q):
    Rs, ps = crane._fk(params, q)
    radii = model.radii + model.inflation
    lo, hi = [], []
    for i in range(len(model.frames)):
        centers, _, mask = _link_spheres(params, model, Rs, ps, q, i)
        centers = jnp.where(mask[:, None], centers, centers[0])
        lo.append(jnp.min(centers - radii[i], axis=0))
        hi.append(jnp.max(centers + radii[i], axis=0))
    return jnp.min(jnp.stack(lo), axis=0), jnp.max(jnp.stack(hi), axis=0)


_extents_batch = jax.jit(jax.vmap(_extents, in_axes=(None, None, 0)))


def workspace_extent(params: CraneParams, resolution: float = 0.1, samples: int = COVERAGE_SAMPLES,
                     seed: int = 0):
    """Bounding box of all collision spheres over sampled joint configurations.

    The sample set holds every corner of the joint-limit box with the rotator
    at zero plus uniform random configurations.
    """
    rng = np.random.default_rng(seed)
    qs = [rng.uniform(params.q_min, params.q_max, (samples, N_JOINTS))]
    corners = np.array(np.meshgrid(*[[lo, hi] for lo, hi in zip(params.q_min, params.q_max)],
                                   indexing="ij")).reshape(N_JOINTS, -1).T
    qs.append(corners)
    model = CollisionModel.build(params, resolution)
    lo, hi = _extents_batch(params, model, jnp.asarray(np.vstack(qs)))
    return np.asarray(lo).min(axis=0), np.asarray(hi).max(axis=0)


def validate(scenario: ScenarioFile) -> list[str]:
    """Workspace coverage diagnostics of a parsed scenario.

    Every other invariant is already checked by :func:`parse_scenario`.
    """
    spec = scenario.spec
    source = str(scenario.path) if scenario.path else "<scenario>"
    out = []
    lo, hi = workspace_extent(spec.params, spec.resolution, seed=scenario.seed)
    if np.any(lo < spec.grid_lower) or np.any(hi > spec.grid_upper):
        out.append(
            f"{source}: environment: grid [{_fmt(spec.grid_lower)}] to [{_fmt(spec.grid_upper)}] does not "
            f"cover the reachable workspace [{_fmt(lo)}] to [{_fmt(hi)}]")
    return out


def _fmt(v):
    return ", ".join(f"{x:.2f}" for x in v)


def bundled_dir() -> Path:
    return Path(str(importlib.resources.files("cranempc") / "scenarios"))


def bundled_scenarios() -> dict[str, Path]:
    """Name to path of every scenario shipped with the package."""
    return {p.stem: p for p in sorted(bundled_dir().glob("*.yaml"))}


def resolve(name_or_path) -> Path:
    """Path of a bundled scenario name or an existing file."""
    path = Path(name_or_path)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    if str(name_or_path) in bundled:
        return bundled[str(name_or_path)]
    raise ScenarioError([f"{name_or_path}: no such file or bundled scenario"])
