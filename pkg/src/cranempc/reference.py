"""Cubic-spline joint reference for the actuated joints.

Stands in for a global planner: a natural cubic spline through joint-space
waypoints, with segment durations stretched until sampled velocities and
accelerations respect per-joint limits. Obstacles are ignored on purpose;
avoiding them is the controller's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from scipy.interpolate import CubicSpline

N_ACT = 5
MAX_SEGMENTS = 32


@dataclass(frozen=True)
class ReferenceSpline:
    """Piecewise cubic ``q_d(tau)``.

    ``coeffs[k, p]`` multiplies ``(tau - knots[k])**p`` on segment ``k``.
    Outside ``[knots[0], knots[-1]]`` the end values are held.
    """

    knots: np.ndarray
    coeffs: np.ndarray

    @property
    def start(self) -> float:
        return float(self.knots[0])

    @property
    def end(self) -> float:
        return float(self.knots[-1])

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[0]

    def _locate(self, tau):
        tau = np.clip(np.asarray(tau, dtype=float), self.knots[0], self.knots[-1])
        k = np.clip(np.searchsorted(self.knots, tau, side="right") - 1, 0, self.n_segments - 1)
        return k, tau - self.knots[k], tau

    def __call__(self, tau, derivative: int = 0) -> np.ndarray:
        k, s, clamped = self._locate(tau)
        raw = np.asarray(tau, dtype=float)
        c = self.coeffs[k]
        if derivative == 0:
            out = c[..., 0, :] + s[..., None] * (c[..., 1, :] + s[..., None] * (c[..., 2, :] + s[..., None] * c[..., 3, :]))
            return out
        if derivative == 1:
            out = c[..., 1, :] + s[..., None] * (2 * c[..., 2, :] + 3 * s[..., None] * c[..., 3, :])
        elif derivative == 2:
            out = 2 * c[..., 2, :] + 6 * s[..., None] * c[..., 3, :]
        else:
            raise ValueError("derivative must be 0, 1 or 2")
        held = (raw < self.knots[0]) | (raw > self.knots[-1])
        return np.where(np.asarray(held)[..., None], 0.0, out)

    def device_arrays(self, max_segments: int = MAX_SEGMENTS):
        """Fixed-size padded arrays for :func:`spline_eval_jax`."""
        n = max(max_segments, self.n_segments)
        knots = np.full(n + 1, 1e12)
        knots[: self.n_segments + 1] = self.knots
        coeffs = np.zeros((n, 4, N_ACT))
        coeffs[: self.n_segments] = self.coeffs
        return jnp.asarray(knots), jnp.asarray(coeffs), jnp.asarray(self.n_segments)


def spline_eval_jax(arrays, tau):
    """Evaluate padded spline arrays at ``tau`` (traceable)."""
    knots, coeffs, n = arrays
    t0 = knots[0]
    t1 = knots[n]
    tau = jnp.clip(tau, t0, t1)
    k = jnp.clip(jnp.searchsorted(knots, tau, side="right") - 1, 0, n - 1)
    s = tau - knots[k]
    c = coeffs[k]
    return c[0] + s * (c[1] + s * (c[2] + s * c[3]))


def _segment_durations(points: np.ndarray, v_limit: np.ndarray, a_limit: np.ndarray) -> np.ndarray:
    delta = np.abs(np.diff(points, axis=0))
    # rest-to-rest cubic over one segment: peak speed 1.5*d/T, peak accel 6*d/T^2
    t_vel = 1.5 * delta / v_limit
    t_acc = np.sqrt(6.0 * delta / a_limit)
    return np.maximum(np.maximum(t_vel, t_acc).max(axis=1), 1e-3)


def plan_reference(waypoints, v_limit, a_limit, start_time: float = 0.0,
                   max_rescale: int = 50) -> ReferenceSpline:
    """Natural cubic spline through ``waypoints`` with limit-respecting timing."""
    points = np.asarray(waypoints, dtype=float)
    if points.size == 0:
        raise ValueError("at least one waypoint is required")
    points = points.reshape(-1, N_ACT)
    v_limit = np.broadcast_to(np.asarray(v_limit, dtype=float), (N_ACT,))
    a_limit = np.broadcast_to(np.asarray(a_limit, dtype=float), (N_ACT,))
    if np.any(v_limit <= 0) or np.any(a_limit <= 0):
        raise ValueError("velocity and acceleration limits must be positive")

    if len(points) == 1:
        coeffs = np.zeros((1, 4, N_ACT))
        coeffs[0, 0] = points[0]
        return ReferenceSpline(np.array([start_time, start_time]), coeffs)

    durations = _segment_durations(points, v_limit, a_limit)
    for _ in range(max_rescale):
        knots = start_time + np.concatenate([[0.0], np.cumsum(durations)])
        spline = CubicSpline(knots, points, bc_type="natural")
        dense = np.linspace(knots[0], knots[-1], 50 * len(durations) + 1)
        vel = np.abs(spline(dense, 1)).max(axis=0) / v_limit
        acc = np.abs(spline(dense, 2)).max(axis=0) / a_limit
        scale = max(vel.max(), np.sqrt(acc.max()))
        if scale <= 1.0 + 1e-9:
            break
        durations = durations * scale * 1.01
    # scipy stores highest power first
    coeffs = np.transpose(spline.c[::-1], (1, 0, 2))
    return ReferenceSpline(knots, np.ascontiguousarray(coeffs))


def eval_reference(spline: ReferenceSpline, tau: float) -> np.ndarray:
    """Reference actuated-joint position at progress ``tau``."""
    return spline(float(tau))
