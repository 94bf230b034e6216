"""Voxel occupancy grid with a truncated Euclidean distance field.

Distances are measured between voxel centers and truncated at ``d_max``.
The field is kept up to date incrementally: every voxel remembers its
closest occupied voxel, removals re-evaluate only the voxels that pointed at
a removed obstacle, and insertions lower distances inside a ``d_max`` band
around the new obstacles. Continuous queries use trilinear interpolation of
the voxel-center samples and are written in ``jax.numpy`` so they can be
differentiated inside the MPC objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_EPS = 1e-9


@dataclass
class VoxelGrid:
    """Boolean occupancy on a regular grid.

    Voxel ``(i, j, k)`` spans ``origin + [i, i+1) * resolution`` along x (and
    likewise for y, z); its center is at ``origin + (i + 0.5) * resolution``.
    """

    origin: np.ndarray
    resolution: float = 0.1
    dims: tuple = (1, 1, 1)
    occupancy: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.resolution = float(self.resolution)
        self.dims = tuple(int(d) for d in self.dims)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")
        if self.occupancy is None:
            self.occupancy = np.zeros(self.dims, dtype=bool)
        else:
            self.occupancy = np.asarray(self.occupancy, dtype=bool)
            if self.occupancy.shape != self.dims:
                raise ValueError("occupancy shape does not match dims")

    @classmethod
    def from_bounds(cls, lower, upper, resolution=0.1) -> "VoxelGrid":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        dims = np.maximum(np.ceil((upper - lower) / resolution - _EPS), 1).astype(int)
        return cls(lower, resolution, tuple(dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.origin) & (points <= self.upper), axis=-1)

    def index_of(self, points) -> np.ndarray:
        """Integer voxel index containing each point (not clipped)."""
        points = np.asarray(points, dtype=float)
        return np.floor((points - self.origin) / self.resolution).astype(int)

    def center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.resolution

    def flat_centers(self, flat) -> np.ndarray:
        return self.center(np.stack(np.unravel_index(np.asarray(flat), self.dims), axis=-1))

    def occupied_indices(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.origin.copy(), self.resolution, self.dims, self.occupancy.copy())

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "resolution": self.resolution,
            "dims": list(self.dims),
            "occupied": self.occupied_indices().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VoxelGrid":
        grid = cls(data["origin"], data["resolution"], tuple(data["dims"]))
        occupied = np.asarray(data.get("occupied", []), dtype=np.int64)
        grid.occupancy.ravel()[occupied] = True
        return grid

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "VoxelGrid":
        return cls.from_dict(json.loads(Path(path).read_text()))


class EdfField(NamedTuple):
    """Immutable device-side snapshot of a distance field used by queries."""

    dist: jax.Array
    origin: jax.Array
    resolution: jax.Array
    d_max: jax.Array


@dataclass
class VoxelEdf:
    """Truncated distance field over a :class:`VoxelGrid`.

    ``closest`` holds the flat index of the nearest occupied voxel, or -1 when
    no obstacle lies within ``d_max``.
    """

    grid: VoxelGrid
    dist: np.ndarray
    d_max: float = 2.0
    closest: np.ndarray = None
    epoch: int = 0
    _field: EdfField = field(default=None, repr=False, compare=False)
    _field_epoch: int = field(default=-1, repr=False, compare=False)

    def __post_init__(self):
        if self.closest is None:
            self.closest = np.full(self.grid.dims, -1, dtype=np.int64)

    @classmethod
    def empty(cls, grid: VoxelGrid, d_max: float = 2.0) -> "VoxelEdf":
        """Field for ``grid`` as if nothing were occupied yet."""
        return cls(grid, np.full(grid.dims, float(d_max)), float(d_max))

    @classmethod
    def from_grid(cls, grid: VoxelGrid, d_max: float = 2.0) -> "VoxelEdf":
        """Build the field for the current occupancy via the incremental path."""
        edf = cls.empty(grid, d_max)
        return update_edf_incremental(edf, grid.occupied_indices())

    def field(self) -> EdfField:
        """Snapshot for queries; re-uploaded only after the field changed."""
        if self._field is None or self._field_epoch != self.epoch:
            self._field = EdfField(
                jnp.asarray(self.dist),
                jnp.asarray(self.grid.origin),
                jnp.asarray(self.grid.resolution),
                jnp.asarray(self.d_max),
            )
            self._field_epoch = self.epoch
        return self._field

    def copy(self) -> "VoxelEdf":
        return VoxelEdf(self.grid.copy(), self.dist.copy(), self.d_max, self.closest.copy(), self.epoch)


def set_box_obstacle(grid: VoxelGrid, min_corner, max_corner, occupied: bool = True) -> np.ndarray:
    """Set occupancy of every voxel whose center lies in the closed box.

    Returns the flat indices of voxels whose state actually changed.
    """
    lo = np.asarray(min_corner, dtype=float)
    hi = np.asarray(max_corner, dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("box corners must be finite")
    if np.any(lo > hi):
        raise ValueError("min_corner must not exceed max_corner")
    first = np.ceil((lo - grid.origin) / grid.resolution - 0.5 - _EPS).astype(int)
    last = np.floor((hi - grid.origin) / grid.resolution - 0.5 + _EPS).astype(int)
    first = np.maximum(first, 0)
    last = np.minimum(last, np.asarray(grid.dims) - 1)
    if np.any(last < first):
        return np.empty(0, dtype=np.int64)
    block = tuple(slice(a, b + 1) for a, b in zip(first, last))
    current = grid.occupancy[block]
    local = np.argwhere(current != occupied)
    grid.occupancy[block] = occupied
    if local.size == 0:
        return np.empty(0, dtype=np.int64)
    return np.ravel_multi_index(tuple((local + first).T), grid.dims).astype(np.int64)


def compute_edf_bruteforce(grid: VoxelGrid, d_max: float = 2.0) -> VoxelEdf:
    """Exact truncated field by nearest-neighbour search over occupied voxels."""
    dist = np.full(grid.dims, float(d_max))
    closest = np.full(grid.dims, -1, dtype=np.int64)
    occupied = grid.occupied_indices()
    if occupied.size:
        tree = cKDTree(np.stack(np.unravel_index(occupied, grid.dims), axis=1))
        every = np.indices(grid.dims).reshape(3, -1).T
        d, which = tree.query(every, distance_upper_bound=d_max / grid.resolution)
        d = d * grid.resolution
        near = d < d_max
        dist.ravel()[near] = d[near]
        closest.ravel()[near] = occupied[which[near]]
    return VoxelEdf(grid, dist, float(d_max), closest)


def _region(indices: np.ndarray, dims, pad: int):
    lo = np.maximum(indices.min(axis=0) - pad, 0)
    hi = np.minimum(indices.max(axis=0) + pad + 1, np.asarray(dims))
    return lo, hi


def _region_edt(features: np.ndarray, grid: VoxelGrid, lo: np.ndarray):
    """Distance and global flat index of the nearest feature inside a region."""
    if not features.any():
        return np.full(features.shape, np.inf), np.full(features.shape, -1, dtype=np.int64)
    d, nearest = ndimage.distance_transform_edt(~features, return_indices=True)
    d = d * grid.resolution
    glob = nearest + lo.reshape(3, 1, 1, 1)
    return d, np.ravel_multi_index(tuple(glob), grid.dims).astype(np.int64)


def update_edf_incremental(edf: VoxelEdf, changed) -> VoxelEdf:
    """Bring ``edf`` in line with occupancy changes already applied to its grid.

    Updates in place and returns ``edf``. Removals are processed first: voxels
    whose recorded closest obstacle disappeared are recomputed inside a
    ``d_max`` band. Insertions then lower distances in the band around the
    new obstacles.
    """
    changed = np.unique(np.asarray(changed, dtype=np.int64).ravel())
    if changed.size == 0:
        return edf
    grid = edf.grid
    pad = int(np.ceil(edf.d_max / grid.resolution)) + 1
    occ_flat = grid.occupancy.ravel()
    inserted = changed[occ_flat[changed]]
    removed = changed[~occ_flat[changed]]
    dist = edf.dist.ravel()
    closest = edf.closest.ravel()

    if removed.size:
        stale = np.flatnonzero(np.isin(closest, removed))
        stale = np.union1d(stale, removed)
        idx = np.stack(np.unravel_index(stale, grid.dims), axis=1)
        lo, hi = _region(idx, grid.dims, pad)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        d, near = _region_edt(grid.occupancy[box], grid, lo)
        local = tuple((idx - lo).T)
        d, near = d[local], near[local]
        inside = d < edf.d_max
        dist[stale] = np.where(inside, d, edf.d_max)
        closest[stale] = np.where(inside, near, -1)

    if inserted.size:
        idx = np.stack(np.unravel_index(inserted, grid.dims), axis=1)
        lo, hi = _region(idx, grid.dims, pad)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        seeds = np.zeros(tuple(hi - lo), dtype=bool)
        seeds[tuple((idx - lo).T)] = True
        d, near = _region_edt(seeds, grid, lo)
        region_flat = np.ravel_multi_index(
            tuple(np.indices(tuple(hi - lo)).reshape(3, -1) + lo.reshape(3, 1)), grid.dims
        )
        d = d.ravel()
        near = near.ravel()
        better = (d < dist[region_flat]) & (d < edf.d_max)
        dist[region_flat[better]] = d[better]
        closest[region_flat[better]] = near[better]

    edf.epoch += 1
    return edf


# ---------------------------------------------------------------- queries


def _trilinear(field: EdfField, p):
    dist = field.dist
    dims = jnp.asarray(dist.shape)
    upper = field.origin + dims * field.resolution
    outside = jnp.any(p < field.origin) | jnp.any(p > upper)
    f = (p - field.origin) / field.resolution - 0.5
    f = jnp.clip(f, 0.0, dims - 1.0)
    i0 = jnp.clip(jnp.floor(f), 0, jnp.maximum(dims - 2, 0)).astype(jnp.int32)
    t = f - i0
    i1 = jnp.minimum(i0 + 1, dims - 1)
    c = [[[dist[ix, iy, iz] for iz in (i0[2], i1[2])] for iy in (i0[1], i1[1])] for ix in (i0[0], i1[0])]
    tx, ty, tz = t[0], t[1], t[2]
    c00 = c[0][0][0] * (1 - tx) + c[1][0][0] * tx
    c01 = c[0][0][1] * (1 - tx) + c[1][0][1] * tx
    c10 = c[0][1][0] * (1 - tx) + c[1][1][0] * tx
    c11 = c[0][1][1] * (1 - tx) + c[1][1][1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    value = c0 * (1 - tz) + c1 * tz
    return jnp.where(outside, field.d_max, value)


def edf_distance(field: EdfField, p):
    """Interpolated distance at ``p``; traceable by JAX."""
    return _trilinear(field, p)


_distance_many = jax.jit(jax.vmap(_trilinear, in_axes=(None, 0)))
_gradient_many = jax.jit(jax.vmap(jax.grad(_trilinear, argnums=1), in_axes=(None, 0)))


def _as_field(edf) -> EdfField:
    return edf.field() if isinstance(edf, VoxelEdf) else edf


def query_distance(edf, p):
    """Trilinear distance at one point (scalar) or many points ``(n, 3)``.

    Points outside the grid report ``d_max``.
    """
    p = np.asarray(p, dtype=float)
    out = np.asarray(_distance_many(_as_field(edf), p.reshape(-1, 3)))
    return float(out[0]) if p.ndim == 1 else out


def query_gradient(edf, p):
    """Gradient of the trilinear interpolant; zero outside the grid."""
    p = np.asarray(p, dtype=float)
    out = np.asarray(_gradient_many(_as_field(edf), p.reshape(-1, 3)))
    return out[0] if p.ndim == 1 else out
