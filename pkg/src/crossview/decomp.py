"""Split annotated scans into per-vehicle point sets and a static background."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import OrientedBox, RigidTransform, estimate_box_transform, kabsch

log = logging.getLogger(__name__)

EXTRACT_MARGIN = 0.1
DEFAULT_MIN_POINTS = 50
DEFAULT_GROUND_BAND = 0.15


class EmptyTrack(ValueError):
    pass


class NoOverlap(RuntimeError):
    pass


def track_sort_key(track_id):
    """Numeric ids sort numerically, anything else lexically after them."""
    s = str(track_id)
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass(eq=False)
class Frame:
    frame_id: int
    timestamp: float
    sensor_pose: RigidTransform
    points: np.ndarray  # sensor frame
    boxes: list = field(default_factory=list)  # [(track_id, OrientedBox world)]
    fragment: str = ""
    pseudo_boxes: list = field(default_factory=list)  # world-frame boxes of unlabeled movers

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def world_points(self) -> np.ndarray:
        return self.sensor_pose.apply(self.points)

    @property
    def sensor_origin(self) -> np.ndarray:
        return self.sensor_pose.translation


@dataclass(eq=False)
class TrackedVehicle:
    track_id: str
    frame_ids: list = field(default_factory=list)
    boxes: list = field(default_factory=list)  # world-frame OrientedBox per frame
    points: list = field(default_factory=list)  # canonical-frame arrays per frame
    reconstructable: bool = True

    @property
    def canonical_box(self) -> OrientedBox:
        return self.boxes[0]

    def transforms(self) -> list[RigidTransform]:
        """World-frame ``T_t`` with ``B_1 = T_t B_t`` for every frame (identity at t = 1)."""
        b1 = self.boxes[0]
        return [estimate_box_transform(b1, b) for b in self.boxes]

    def counts(self) -> list[int]:
        return [len(p) for p in self.points]


@dataclass(eq=False)
class BackgroundCloud:
    points: np.ndarray
    fragments: tuple = ()

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)


def _box_local_canonical(box, canonical):
    if canonical is None:
        return box.to_local
    t = estimate_box_transform(canonical, box)
    return lambda p: canonical.to_local(t.apply(p))


def assign_points(points, boxes, margin=EXTRACT_MARGIN) -> np.ndarray:
    """Index into ``boxes`` of the first box containing each point, or -1."""
    owner = np.full(len(points), -1)
    for i, box in enumerate(boxes):
        free = owner < 0
        if not free.any():
            break
        inside = box.contains(points[free], margin)
        owner[np.flatnonzero(free)[inside]] = i
    return owner


def extract_vehicle_points(frame: Frame, canonical: dict | None = None, margin=EXTRACT_MARGIN):
    """Partition a frame's points into per-track canonical sets and world-frame background.

    Boxes are tried in track-id order and a point goes to the first box that
    contains it (inflated by ``margin``). Canonical coordinates are the local
    frame of the track's first box, reached through the box-to-box rigid map.
    """
    pts = frame.world_points()
    ordered = sorted(frame.boxes, key=lambda tb: track_sort_key(tb[0]))
    owner = assign_points(pts, [b for _, b in ordered], margin)
    vehicles = {}
    for i, (tid, box) in enumerate(ordered):
        ref = None if canonical is None else canonical.get(tid)
        vehicles[tid] = _box_local_canonical(box, ref)(pts[owner == i])
    return vehicles, pts[owner < 0]


def build_tracks(frames, margin=EXTRACT_MARGIN) -> dict[str, TrackedVehicle]:
    """Collect per-track box sequences and canonical point sets over ``frames`` in time order."""
    tracks: dict[str, TrackedVehicle] = {}
    for fr in frames:
        for tid, box in fr.boxes:
            tracks.setdefault(tid, TrackedVehicle(tid))
    canonical = {}
    for fr in frames:
        for tid, box in fr.boxes:
            canonical.setdefault(tid, box)
        vehicles, _ = extract_vehicle_points(fr, canonical, margin)
        for tid, box in fr.boxes:
            tr = tracks[tid]
            tr.frame_ids.append(fr.frame_id)
            tr.boxes.append(box)
            tr.points.append(vehicles[tid])
    return dict(sorted(tracks.items(), key=lambda kv: track_sort_key(kv[0])))


def filter_unreconstructable(vehicle: TrackedVehicle, min_points: int = DEFAULT_MIN_POINTS) -> bool:
    counts = vehicle.counts()
    vehicle.reconstructable = bool(counts) and max(counts) >= min_points
    return vehicle.reconstructable


def select_best_frame(vehicle: TrackedVehicle) -> int:
    counts = vehicle.counts()
    if not counts:
        raise EmptyTrack(f"track {vehicle.track_id} has no frames")
    return int(np.argmax(counts))  # argmax keeps the earliest on ties


def mirror_augment(points, tol: float = 1e-3) -> np.ndarray:
    """Union of box-local ``points`` and their reflection across the ``y = 0`` plane.

    Reflected points closer than ``tol`` to an input point are dropped, which
    keeps on-plane points single and makes the operation idempotent.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        return p
    mirrored = p * np.array([1.0, -1.0, 1.0])
    d, _ = cKDTree(p).query(mirrored, distance_upper_bound=tol)
    return np.concatenate([p, mirrored[~(d < tol)]])


def filter_ground_points(points, box: OrientedBox, band: float = DEFAULT_GROUND_BAND) -> np.ndarray:
    """Drop box-local points less than ``band`` above the box bottom face."""
    if band < 0:
        raise ValueError("band must be >= 0")
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return p[p[:, 2] + box.size[2] / 2.0 >= band]


def complete_vehicle(vehicle: TrackedVehicle, band: float = DEFAULT_GROUND_BAND, imported=None) -> np.ndarray:
    """Cloud used to fit a vehicle field.

    An externally completed cloud is used as-is. Otherwise the best frame is
    mirrored and then ground-filtered.
    """
    if imported is not None:
        return np.asarray(imported, dtype=float).reshape(-1, 3)
    best = select_best_frame(vehicle)
    pts = mirror_augment(vehicle.points[best])
    return filter_ground_points(pts, vehicle.canonical_box, band)


def inside_any(points, boxes, margin=0.0) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    mask = np.zeros(len(p), dtype=bool)
    for box in boxes:
        mask |= box.contains(p, margin)
    return mask


def remove_dynamic_background(background: BackgroundCloud, pseudo_boxes, margin: float = 0.1) -> BackgroundCloud:
    keep = ~inside_any(background.points, pseudo_boxes, margin)
    return BackgroundCloud(background.points[keep], background.fragments)


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """One input point per occupied voxel, the one closest to the voxel centroid, ordered by voxel key.

    Keeping real points (rather than centroids, which sit off the surface near
    edges) leaves ICP unbiased when source and target sample the same surface.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        return p
    keys = np.floor(p / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    cent = np.zeros((len(counts), 3))
    for ax in range(3):
        cent[:, ax] = np.bincount(inv, weights=p[:, ax], minlength=len(counts))
    cent /= counts[:, None]
    d2 = np.sum((p - cent[inv]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(p)), d2, inv))
    first = order[np.r_[True, inv[order][1:] != inv[order][:-1]]]
    return p[first]


def icp(source, target, init: RigidTransform | None = None, max_iterations=50, gate=1.0,
        min_correspondences=30, tol=1e-7) -> RigidTransform:
    """Point-to-point ICP returning ``T`` such that ``T(source)`` lies on ``target``."""
    tree = cKDTree(target)
    t = RigidTransform.identity() if init is None else init
    prev_err = np.inf
    for _ in range(max_iterations):
        moved = t.apply(source)
        d, j = tree.query(moved, distance_upper_bound=gate)
        ok = np.isfinite(d)
        if ok.sum() < min_correspondences:
            raise NoOverlap(f"only {int(ok.sum())} correspondences within {gate} m")
        t = kabsch(moved[ok], target[j[ok]]) @ t
        err = float(np.mean(d[ok] ** 2))
        if abs(prev_err - err) < tol:
            break
        prev_err = err
    return t


def align_fragments(clouds, voxel=0.2, max_iterations=50, gate=1.0, min_correspondences=30) -> list[RigidTransform]:
    """World-frame corrections per fragment; the first fragment is the fixed gauge.

    Each later fragment is registered against everything aligned before it
    (which always includes the first fragment and its predecessor).
    """
    clouds = [np.asarray(c, dtype=float).reshape(-1, 3) for c in clouds]
    if not clouds:
        raise ValueError("need at least one fragment")
    corrections = [RigidTransform.identity()]
    reference = [clouds[0]]
    for cloud in clouds[1:]:
        src = voxel_downsample(cloud, voxel)
        tgt = np.concatenate(reference)
        t = icp(src, tgt, max_iterations=max_iterations, gate=gate, min_correspondences=min_correspondences)
        corrections.append(t)
        reference.append(t.apply(cloud))
    return corrections
