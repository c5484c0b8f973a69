"""Rigid transforms, yaw-only oriented boxes and ray/box intersection.

Points are ``(..., 3)`` float arrays; a single point is just a length-3 array.

Box corner order (frozen)::

    index  local offset (length x, width y, height z), in half-sizes
      0    (+, +, -)     front-left-bottom
      1    (+, -, -)     front-right-bottom
      2    (-, -, -)     rear-right-bottom
      3    (-, +, -)     rear-left-bottom
      4-7  same as 0-3 with +z (top face)

The box center is the geometric center (not the bottom face center), and the
local x axis points along the box length (heading).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [1, -1, -1],
        [-1, -1, -1],
        [-1, 1, -1],
        [1, 1, 1],
        [1, -1, 1],
        [-1, -1, 1],
        [-1, 1, 1],
    ],
    dtype=float,
)


class DegenerateBox(ValueError):
    """A box with a zero-length side cannot define a rigid frame."""


def _frozen(a, shape):
    a = np.array(a, dtype=float).reshape(shape)
    a.setflags(write=False)
    return a


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An SE(3) element acting as ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        r = self.rotation
        if not (np.allclose(r @ r.T, np.eye(3), atol=1e-6) and abs(np.linalg.det(r) - 1.0) < 1e-6):
            raise ValueError("rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(rot_z(yaw), translation)

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        """Heading of the rotated x axis projected on the ground plane."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"RigidTransform(yaw={self.yaw:.6g}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a o b``, i.e. apply ``b`` first."""
    return a @ b


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, (3,)))
        object.__setattr__(self, "size", _frozen(self.size, (3,)))
        object.__setattr__(self, "yaw", float(self.yaw))
        if np.any(self.size < 0) or not np.all(np.isfinite(self.size)):
            raise ValueError(f"box size must be finite and non-negative, got {self.size}")

    @property
    def rotation(self) -> np.ndarray:
        return rot_z(self.yaw)

    @property
    def pose(self) -> RigidTransform:
        """Box-local to world transform."""
        return RigidTransform(self.rotation, self.center)

    def corners(self) -> np.ndarray:
        """The 8 corners as an ``(8, 3)`` array in the frozen order."""
        return self.pose.apply(_CORNER_SIGNS * (self.size / 2.0))

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        local = self.to_local(points)
        return np.all(np.abs(local) <= self.size / 2.0 + margin, axis=-1)

    def inflated(self, margin: float) -> OrientedBox:
        return OrientedBox(self.center, self.size + 2.0 * margin, self.yaw)

    def transformed(self, t: RigidTransform) -> OrientedBox:
        """Apply ``t`` to the box. Any roll/pitch in ``t`` is discarded."""
        yaw = self.yaw + t.yaw
        return OrientedBox(t.apply(self.center), self.size, np.arctan2(np.sin(yaw), np.cos(yaw)))

    def __repr__(self):
        return f"OrientedBox(center={self.center.tolist()}, size={self.size.tolist()}, yaw={self.yaw:.6g})"


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    max_range: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        object.__setattr__(self, "direction", _frozen(normalize(self.direction), (3,)))
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(t, self.direction)

    def transformed(self, t: RigidTransform) -> Ray:
        return Ray(t.apply(self.origin), t.apply_vector(self.direction), self.max_range)


def ray_box_intervals(origins, directions, box: OrientedBox, t_min=0.0, t_max=np.inf, margin=0.0):
    """Vectorized slab test in the box frame.

    Returns ``(t_near, t_far, hit)``; where ``hit`` is False the interval values
    are meaningless. The interval is clipped to ``[t_min, t_max]`` and a
    zero-length interval (grazing contact) counts as a hit. Directions need not
    be unit length; ``t`` is measured in multiples of the given direction.
    """
    o = box.to_local(origins)
    d = np.asarray(directions, dtype=float) @ box.rotation
    half = box.size / 2.0 + margin
    n = o.shape[0]
    t_near = np.broadcast_to(np.asarray(t_min, dtype=float), (n,)).copy()
    t_far = np.broadcast_to(np.asarray(t_max, dtype=float), (n,)).copy()
    hit = np.ones(n, dtype=bool)
    for ax in range(3):
        da, oa = d[:, ax], o[:, ax]
        parallel = da == 0.0
        hit &= ~(parallel & (np.abs(oa) > half[ax]))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half[ax] - oa) / da
            tb = (half[ax] - oa) / da
        lo = np.where(parallel, -np.inf, np.minimum(ta, tb))
        hi = np.where(parallel, np.inf, np.maximum(ta, tb))
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    hit &= t_near <= t_far
    return t_near, t_far, hit


def ray_box_intersect(ray: Ray, box: OrientedBox, margin: float = 0.0):
    """Entry/exit distances of ``ray`` inside ``box`` clipped to ``[0, max_range]``, or None."""
    t0, t1, hit = ray_box_intervals(ray.origin[None], ray.direction[None], box, 0.0, ray.max_range, margin)
    if not hit[0]:
        return None
    return float(t0[0]), float(t1[0])


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def estimate_box_transform(canonical: OrientedBox, observed: OrientedBox) -> RigidTransform:
    """Rigid ``T`` with ``canonical.corners ~= T . observed.corners`` (Kabsch over 8 corners)."""
    for b in (canonical, observed):
        if np.any(b.size <= 0):
            raise DegenerateBox(f"box has a zero-length side: {b.size.tolist()}")
    return kabsch(observed.corners(), canonical.corners())
