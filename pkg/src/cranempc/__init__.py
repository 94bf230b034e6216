"""Collision-free sway-damping MPC for a hydraulic forestry crane.

The dynamics and the MPC objective are written in ``jax.numpy`` and need
double precision, so importing the package switches JAX to 64-bit mode. The
compiled solver kernels take a while to build, so they are cached on disk
(``$CRANEMPC_JAX_CACHE``, default ``~/.cache/cranempc/jax``; set it to an
empty string to disable).
"""

import os

import jax

jax.config.update("jax_enable_x64", True)
_cache = os.environ.get("CRANEMPC_JAX_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "cranempc", "jax"))
if _cache:
    jax.config.update("jax_compilation_cache_dir", _cache)
    jax.config.update("jax_persistent_cache_min_compile_time_secs", 0.5)

from .crane import (  # noqa: E402
    CraneParams,
    CraneState,
    actuator_jerk,
    bias_forces,
    default_params,
    forward_kinematics,
    hanging_equilibrium,
    mass_matrix,
    pendulum_accel,
    pump_flow,
    state_derivative,
)
from .edf import (  # noqa: E402
    VoxelEdf,
    VoxelGrid,
    compute_edf_bruteforce,
    query_distance,
    query_gradient,
    set_box_obstacle,
    update_edf_incremental,
)
from .collision import (  # noqa: E402
    CollisionModel,
    SphereSet,
    decompose_links,
    link_signed_distance,
    signed_distance_gradient,
)
from .reference import ReferenceSpline, eval_reference, plan_reference  # noqa: E402
from .mpc import (  # noqa: E402
    MpcConfig,
    OcpSolution,
    SwayDampingMPC,
    discretize_step,
    penalty,
    shift_warm_start,
    solve_mpc,
    stage_cost,
    total_objective,
)
from .sim import (  # noqa: E402
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
from .scenario import ScenarioError, load_scenario, parse_scenario  # noqa: E402

__version__ = "0.1.0"
