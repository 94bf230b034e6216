"""Sphere decomposition of the crane links and their signed distances.

Three collision links are modelled: the inner boom, the arm (outer boom
plus telescope, whose length follows the telescope joint) and the gripper
(both pendulum links as one body). Each link is a centerline segment
covered by equally spaced spheres; the telescopic arm gets more spheres as
it extends so that the spacing stays at or below the target.

The traced helpers work on a fixed maximum sphere count per link and mask
the unused slots, which keeps array shapes static for JAX.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import crane
from .edf import EdfField, VoxelEdf, _trilinear, query_distance

LINK_NAMES = ("boom", "arm", "gripper")
_MASKED = 1e6


@dataclass(frozen=True)
class CollisionModel:
    """Centerline segments and sphere radii of the three collision links.

    ``frames[i]`` is the 0-based link frame the segment is attached to; the
    segment runs from ``starts[i]`` to ``starts[i] + lengths[i]`` along the
    unit vector ``directions[i]`` of that frame. A link listed in
    ``telescopic`` lengthens by the telescope joint value. ``inflation`` is
    added to every radius to absorb voxel discretization (half a voxel).
    """

    frames: tuple = field(default=(1, 2, 6), metadata={"static": True})
    telescopic: tuple = field(default=(False, True, False), metadata={"static": True})
    max_counts: tuple = field(default=(11, 15, 3), metadata={"static": True})
    telescope_joint: int = field(default=3, metadata={"static": True})
    directions: np.ndarray = field(default_factory=lambda: np.array(
        [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]]))
    starts: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lengths: np.ndarray = field(default_factory=lambda: np.array([4.0, 3.0, 0.6]))
    radii: np.ndarray = field(default_factory=lambda: np.array([0.25, 0.20, 0.45]))
    spacing: float = 0.4
    inflation: float = 0.05

    @classmethod
    def build(cls, params: crane.CraneParams, resolution: float = 0.1, spacing: float = 0.4,
              radii=(0.25, 0.20, 0.45), lengths=(4.0, 3.0, 0.6), frames=(1, 2, 6),
              telescopic=(False, True, False), directions=None, starts=(0.0, 0.0, 0.0)):
        """Model sized for ``params`` (sphere capacity covers the full telescope stroke)."""
        tele = params.telescope_index
        counts = []
        for length, ext in zip(lengths, telescopic):
            longest = length + (float(params.q_max[tele]) if ext else 0.0)
            counts.append(sphere_count(longest, spacing))
        kwargs = {}
        if directions is not None:
            kwargs["directions"] = np.asarray(directions, dtype=float)
        return cls(
            frames=tuple(int(f) for f in frames),
            telescopic=tuple(bool(t) for t in telescopic),
            max_counts=tuple(counts),
            telescope_joint=tele,
            starts=np.asarray(starts, dtype=float),
            lengths=np.asarray(lengths, dtype=float),
            radii=np.asarray(radii, dtype=float),
            spacing=float(spacing),
            inflation=0.5 * float(resolution),
            **kwargs,
        )

    @property
    def effective_radii(self) -> np.ndarray:
        return np.asarray(self.radii) + self.inflation


jax.tree_util.register_dataclass(
    CollisionModel,
    data_fields=["directions", "starts", "lengths", "radii", "spacing", "inflation"],
    meta_fields=["frames", "telescopic", "max_counts", "telescope_joint"],
)


def sphere_count(length: float, spacing: float) -> int:
    return int(math.ceil(length / spacing - 1e-9)) + 1


@dataclass
class SphereSet:
    """Spheres per collision link at one configuration.

    ``centers[i]`` is ``(M_i, 3)`` in world coordinates, ``radii[i]`` the
    inflated radii and ``offsets[i]`` the distance of each center along the
    link centerline from the segment start (its attachment).
    """

    centers: list
    radii: list
    offsets: list
    frames: tuple


def _link_spheres(params: crane.CraneParams, model: CollisionModel, Rs, ps, q, i):
    """Padded centers, offsets and validity mask of link ``i`` (traceable)."""
    length = model.lengths[i]
    if model.telescopic[i]:
        length = length + q[model.telescope_joint]
    count = jnp.ceil(length / model.spacing - 1e-9) + 1
    slots = jnp.arange(model.max_counts[i], dtype=float)
    offsets = model.starts[i] + length * slots / jnp.maximum(count - 1.0, 1.0)
    frame = model.frames[i]
    axis = Rs[frame] @ model.directions[i]
    centers = ps[frame] + offsets[:, None] * axis
    return centers, offsets, slots < count


def _link_sd(field: EdfField, centers, mask, radius):
    values = jax.vmap(_trilinear, in_axes=(None, 0))(field, centers) - radius
    values = jnp.where(mask, values, _MASKED)
    j = jnp.argmin(values)
    return values[j], j


def link_distances(params: crane.CraneParams, model: CollisionModel, field: EdfField, q):
    """``sd_i`` for the three links at ``q`` (traceable, 3-vector)."""
    Rs, ps = crane._fk(params, q)
    radii = model.radii + model.inflation
    out = []
    for i in range(len(model.frames)):
        centers, _, mask = _link_spheres(params, model, Rs, ps, q, i)
        out.append(_link_sd(field, centers, mask, radii[i])[0])
    return jnp.stack(out)


def min_distance(params, model, field, q):
    return jnp.min(link_distances(params, model, field, q))


_link_distances_jit = jax.jit(link_distances)
_link_distances_grad = jax.jit(jax.jacfwd(link_distances, argnums=3))


def _field(edf):
    return edf.field() if isinstance(edf, VoxelEdf) else edf


def decompose_links(params: crane.CraneParams, q, model: CollisionModel | None = None) -> SphereSet:
    """Spheres covering boom, arm and gripper at configuration ``q``."""
    model = CollisionModel.build(params) if model is None else model
    q = np.asarray(q, dtype=float)
    Rs, ps = crane._fk_jit(params, q)
    centers, radii, offsets = [], [], []
    for i in range(len(model.frames)):
        c, off, mask = _link_spheres(params, model, Rs, ps, q, i)
        mask = np.asarray(mask)
        centers.append(np.asarray(c)[mask])
        offsets.append(np.asarray(off)[mask])
        radii.append(np.full(int(mask.sum()), model.radii[i] + model.inflation))
    return SphereSet(centers, radii, offsets, model.frames)


def link_signed_distance(edf, centers, radii):
    """Smallest ``distance(center) - radius`` over one link's spheres.

    Returns ``(sd, j)`` with ``j`` the minimizing sphere (lowest index on ties).
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(centers),))
    if len(centers) == 0:
        raise ValueError("link has no spheres")
    values = np.atleast_1d(query_distance(edf, centers)) - radii
    j = int(np.argmin(values))
    return float(values[j]), j


def signed_distances(params: crane.CraneParams, edf, q, model: CollisionModel | None = None) -> np.ndarray:
    model = CollisionModel.build(params) if model is None else model
    return np.asarray(_link_distances_jit(params, model, _field(edf), jnp.asarray(q, dtype=float)))


def signed_distance_gradient(edf, params: crane.CraneParams, q, link: int,
                             model: CollisionModel | None = None) -> np.ndarray:
    """``d sd_link / d q`` through the minimizing sphere (7-vector)."""
    model = CollisionModel.build(params) if model is None else model
    jac = _link_distances_grad(params, model, _field(edf), jnp.asarray(q, dtype=float))
    return np.asarray(jac[link])
