"""Binary occupancy of observed space, used to veto background geometry.

Voxels live on the global lattice ``floor(p / voxel_size)``; a grid stores the
integer index of its first voxel (``origin``) so that dilation and
serialization stay exact. Each voxel is half-open, ``[lo, lo + voxel_size)``
per axis. Occupancy is kept bit-packed (C order over ``(nx, ny, nz)``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import OrientedBox, ray_box_intervals


class EmptyCloud(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    origin: np.ndarray  # int64 lattice index of voxel (0, 0, 0)
    dims: tuple
    voxel_size: float
    bits: np.ndarray  # packed, little bit order

    @classmethod
    def from_dense(cls, origin, voxel_size, dense) -> OccupancyGrid:
        dense = np.asarray(dense, dtype=bool)
        bits = np.packbits(dense.ravel(), bitorder="little")
        bits.setflags(write=False)
        origin = np.array(origin, dtype=np.int64).reshape(3)
        origin.setflags(write=False)
        return cls(origin, tuple(int(n) for n in dense.shape), float(voxel_size), bits)

    @property
    def lo(self) -> np.ndarray:
        return self.origin * self.voxel_size

    @property
    def hi(self) -> np.ndarray:
        return (self.origin + np.array(self.dims)) * self.voxel_size

    @property
    def bounds_box(self) -> OrientedBox:
        return OrientedBox((self.lo + self.hi) / 2, self.hi - self.lo, 0.0)

    def dense(self) -> np.ndarray:
        n = int(np.prod(self.dims))
        return np.unpackbits(self.bits, count=n, bitorder="little").astype(bool).reshape(self.dims)

    def count(self) -> int:
        return int(np.unpackbits(self.bits).sum())

    def occupied_keys(self) -> set:
        """Global lattice indices of occupied voxels."""
        return {tuple(k) for k in (np.argwhere(self.dense()) + self.origin).tolist()}

    def voxel_index(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.floor(p / self.voxel_size).astype(np.int64) - self.origin

    def is_observed(self, points):
        """True where a point's voxel is inside the grid and occupied."""
        scalar = np.ndim(points) == 1
        idx = self.voxel_index(points)
        dims = np.array(self.dims)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        ii = idx[inside]
        flat = (ii[:, 0] * dims[1] + ii[:, 1]) * dims[2] + ii[:, 2]
        out[inside] = (self.bits[flat >> 3] >> (flat & 7).astype(np.uint8)) & 1 == 1
        return bool(out[0]) if scalar else out

    def exit_distance(self, origins, directions) -> np.ndarray:
        """Ray parameter at which each ray leaves its current voxel."""
        o = np.asarray(origins, dtype=float)
        d = np.asarray(directions, dtype=float)
        v = self.voxel_size
        cell = np.floor(o / v)
        with np.errstate(divide="ignore", invalid="ignore"):
            nxt = np.where(d > 0, (cell + 1) * v, cell * v)
            t = np.where(d != 0, (nxt - o) / d, np.inf)
        return np.maximum(t.min(axis=1), 0.0)

    def entry_interval(self, origins, directions, t_min=0.0, t_max=np.inf):
        return ray_box_intervals(origins, directions, self.bounds_box, t_min, t_max)


def build_occupancy(points, voxel_size: float = 0.4) -> OccupancyGrid:
    """Voxelize ``points``; the grid spans their lattice cells plus one voxel of padding."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyCloud("cannot build occupancy from an empty cloud")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(p / voxel_size).astype(np.int64)
    origin = keys.min(axis=0) - 1
    dims = keys.max(axis=0) - origin + 2
    dense = np.zeros(tuple(dims), dtype=bool)
    k = keys - origin
    dense[k[:, 0], k[:, 1], k[:, 2]] = True
    return OccupancyGrid.from_dense(origin, voxel_size, dense)


def dilate(grid: OccupancyGrid, radius_voxels: int) -> OccupancyGrid:
    """Cube (Chebyshev) dilation; the grid grows by ``radius_voxels`` on each side."""
    r = int(radius_voxels)
    if r < 0:
        raise ValueError("radius must be >= 0")
    if r == 0:
        return grid
    dense = np.pad(grid.dense(), r).astype(np.uint8)
    out = ndimage.maximum_filter(dense, size=2 * r + 1, mode="constant", cval=0)
    return OccupancyGrid.from_dense(grid.origin - r, grid.voxel_size, out.astype(bool))


def constrain_background_sample(grid: OccupancyGrid, points, sdf, drop):
    """Force ``p_d = 1`` and no surface (``s = +inf``) wherever a sample is unobserved."""
    obs = grid.is_observed(points)
    if np.ndim(obs) == 0:
        return (sdf, drop) if obs else (np.inf, 1.0)
    s = np.where(obs, sdf, np.inf)
    p = np.where(obs, drop, 1.0)
    return s, p


# on-disk layout: header then packed bits
OCC_MAGIC = b"XVOCC\x00\x00\x00"
OCC_VERSION = 1
_OCC_HEADER = struct.Struct("<8sI3q6dd3I")


def occupancy_to_bytes(grid: OccupancyGrid) -> bytes:
    """Little-endian header (magic, version, origin index, lo/hi bounds, voxel size, dims) + bits."""
    header = _OCC_HEADER.pack(OCC_MAGIC, OCC_VERSION, *grid.origin.tolist(), *grid.lo, *grid.hi,
                              grid.voxel_size, *grid.dims)
    return header + grid.bits.tobytes()


def occupancy_from_bytes(data: bytes) -> OccupancyGrid:
    if len(data) < _OCC_HEADER.size:
        raise ValueError("truncated occupancy header")
    magic, version, *rest = _OCC_HEADER.unpack_from(data)
    if magic != OCC_MAGIC:
        raise ValueError("not an occupancy file")
    if version != OCC_VERSION:
        raise ValueError(f"unsupported occupancy version {version}")
    origin = np.array(rest[:3], dtype=np.int64)
    voxel = rest[9]
    dims = tuple(rest[10:13])
    nbytes = (int(np.prod(dims)) + 7) // 8
    payload = np.frombuffer(data, dtype=np.uint8, offset=_OCC_HEADER.size)
    if payload.size != nbytes:
        raise ValueError(f"occupancy payload has {payload.size} bytes, expected {nbytes}")
    origin.setflags(write=False)
    bits = payload.copy()
    bits.setflags(write=False)
    return OccupancyGrid(origin, dims, voxel, bits)


def save_occupancy(grid: OccupancyGrid, path) -> None:
    Path(path).write_bytes(occupancy_to_bytes(grid))


def load_occupancy(path) -> OccupancyGrid:
    return occupancy_from_bytes(Path(path).read_bytes())
