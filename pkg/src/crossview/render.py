"""Sphere-trace the reconstructed fields and composite them into LiDAR frames.

Every scan ray gets one background candidate plus one candidate per vehicle
box it crosses. A candidate with ``p_d > 0.5`` is a drop; the frame keeps the
nearest surviving range, or a drop if none survive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decomp import track_sort_key
from .field import SdfGridField, bisect_roots, polish_roots, trace_rays
from .geom import OrientedBox, Ray, RigidTransform, estimate_box_transform, ray_box_intervals
from .occupancy import OccupancyGrid

DROP_THRESHOLD = 0.5
BACKGROUND = "background"


class NoFields(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SensorModel:
    """Uniform elevation x azimuth scan pattern; sensor frame is x forward, y left, z up."""

    pose: RigidTransform
    channels: int = 64
    vertical_fov: tuple = (-25.0, 15.0)
    horizontal_fov: tuple = (-180.0, 180.0)
    horizontal_resolution: float = 0.2
    max_range: float = 200.0
    name: str = "sensor"

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.vertical_fov[0] > self.vertical_fov[1] or self.horizontal_fov[0] > self.horizontal_fov[1]:
            raise ValueError("fov bounds must be ordered")
        if not self.horizontal_resolution > 0 or not self.max_range > 0:
            raise ValueError("resolution and max_range must be positive")

    @property
    def elevations(self) -> np.ndarray:
        lo, hi = self.vertical_fov
        if self.channels == 1:
            return np.array([np.deg2rad(lo)])
        return np.deg2rad(np.linspace(lo, hi, self.channels))

    @property
    def azimuths(self) -> np.ndarray:
        lo, hi = self.horizontal_fov
        n = int(round((hi - lo) / self.horizontal_resolution))
        return np.deg2rad(lo + self.horizontal_resolution * np.arange(n))

    @property
    def pattern_shape(self) -> tuple[int, int]:
        return self.channels, len(self.azimuths)

    def directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, channel-major."""
        el, az = np.meshgrid(self.elevations, self.azimuths, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass(eq=False)
class VehicleModel:
    field: SdfGridField
    canonical_box: OrientedBox


@dataclass(eq=False)
class SceneGraph:
    """Everything needed to render: background, per-track models and box timeline.

    ``timeline`` maps frame id to ``[(track_id, world OrientedBox)]``;
    ``canonical_boxes`` holds each track's first box. Tracks listed in
    ``substitutions`` borrow the donor track's field.
    """

    background: SdfGridField
    occupancy: OccupancyGrid
    vehicles: dict = field(default_factory=dict)
    canonical_boxes: dict = field(default_factory=dict)
    timeline: dict = field(default_factory=dict)
    substitutions: dict = field(default_factory=dict)

    def resolve(self, track_id):
        """``(model, scale)`` rendering ``track_id``; ``scale`` maps recipient-local to donor-local coordinates."""
        if track_id in self.vehicles:
            return self.vehicles[track_id], None
        donor = self.substitutions.get(track_id)
        if donor is None:
            raise KeyError(f"track {track_id} has neither a field nor a donor")
        model = self.vehicles[donor]
        scale = model.canonical_box.size / self.canonical_boxes[track_id].size
        return model, scale

    def to_canonical(self, track_id, box_t: OrientedBox) -> RigidTransform:
        """World at frame t -> canonical box-local coordinates: ``B_1^{-1} T_t``."""
        b1 = self.canonical_boxes[track_id]
        return b1.pose.inverse() @ estimate_box_transform(b1, box_t)


@dataclass(eq=False)
class RenderedFrame:
    """Per-ray results over the scan pattern plus annotations in the sensor frame."""

    frame_id: int
    pattern_shape: tuple
    directions: np.ndarray  # sensor frame, per ray
    ranges: np.ndarray  # NaN where dropped
    sources: np.ndarray  # object array: BACKGROUND, track id, or None for drops
    boxes: list  # [(track_id, (8, 3) corners in sensor frame)]

    @property
    def drop(self) -> np.ndarray:
        return np.isnan(self.ranges)

    @property
    def points(self) -> np.ndarray:
        keep = ~self.drop
        return self.directions[keep] * self.ranges[keep, None]

    @property
    def point_sources(self) -> list:
        return [s for s, k in zip(self.sources, ~self.drop) if k]


def sphere_trace(fld: SdfGridField, ray: Ray, eps: float = 1e-3, max_steps: int = 128):
    """Range of the first surface along ``ray`` or None on a miss."""
    tr = trace_rays(fld, ray.origin[None], ray.direction[None], 0.0, ray.max_range, eps, max_steps)
    return float(tr.t[0]) if tr.hit[0] else None


def trace_vehicle(fld: SdfGridField, to_canonical: RigidTransform, origins, directions, t_near, t_far,
                  scale=None, eps=1e-3, max_steps=128):
    """Vectorized vehicle candidates restricted to the box interval; returns ``(ranges, p_d)``."""
    o = to_canonical.apply(origins)
    d = to_canonical.apply_vector(directions)
    if scale is not None:
        o, d = o * scale, d * scale
    tr = trace_rays(fld, o, d, t_near, t_far, eps, max_steps)
    p_d = np.ones(len(o))
    ranges = np.full(len(o), np.nan)
    if tr.hit.any():
        h = np.flatnonzero(tr.hit)
        ranges[h] = tr.t[h]
        p_d[h] = fld.query_drop(o[h] + tr.t[h, None] * d[h])
    return ranges, p_d


def render_candidate_vehicle(fld: SdfGridField, to_canonical: RigidTransform, ray: Ray, interval, scale=None,
                             eps=1e-3, max_steps=128):
    """``(range or None, p_d)`` for one ray inside one track's box interval."""
    if interval is None:
        return None, 1.0
    r, p = trace_vehicle(fld, to_canonical, ray.origin[None], ray.direction[None],
                         interval[0], interval[1], scale, eps, max_steps)
    return (None if np.isnan(r[0]) else float(r[0])), float(p[0])


def trace_background(fld: SdfGridField, grid: OccupancyGrid, origins, directions, max_range,
                     eps=1e-3, max_steps=512):
    """Background candidates under the visibility constraint; returns ``(ranges, p_d)``.

    Samples in unobserved voxels carry no surface: the march skips to the next
    voxel boundary. A surface counts only if the march reaches it from the
    outside while in observed space, and only if the refined hit point is
    itself observed.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = len(o)
    f0, f1, fok = ray_box_intervals(o, d, fld.bounds_box, 0.0, max_range)
    g0, g1, gok = grid.entry_interval(o, d, 0.0, max_range)
    t0 = np.maximum(f0, g0)
    t1 = np.minimum(f1, g1)
    ok = fok & gok & (t0 <= t1)
    t = np.where(ok, t0, np.nan)
    t_out = np.full(n, np.nan)  # last observed sample in free space, NaN if the previous one was not
    hit = np.zeros(n, bool)
    bracketed = np.zeros(n, bool)
    active = np.flatnonzero(ok)
    nudge = 1e-6 * grid.voxel_size
    for _ in range(max_steps):
        if active.size == 0:
            break
        ta = t[active]
        p = o[active] + ta[:, None] * d[active]
        obs = grid.is_observed(p)
        s = np.where(obs, fld.query_sdf(p), np.inf)
        outside = np.isfinite(t_out[active])
        conv = obs & (np.abs(s) < eps) & (outside | (s >= 0))
        crossed = obs & ~conv & (s < 0) & outside
        hit[active[conv | crossed]] = True
        bracketed[active[crossed]] = True
        skip = ~obs | (s < 0) & ~outside
        step = np.where(skip, grid.exit_distance(p, d[active]) + nudge, s)
        t_out[active] = np.where(obs & (s > 0), ta, np.where(obs & outside, t_out[active], np.nan))
        tn = np.minimum(ta + step, t1[active])
        stop = conv | crossed
        t[active] = np.where(stop, ta, tn)
        active = active[~stop & (ta < t1[active])]
    idx = np.flatnonzero(hit)
    ranges = np.full(n, np.nan)
    p_d = np.ones(n)
    if idx.size:
        br = bracketed[idx]
        tp = np.empty(idx.size)
        if br.any():
            b = idx[br]
            tp[br] = bisect_roots(fld, o[b], d[b], t_out[b], t[b])
        if (~br).any():
            c = idx[~br]
            tp[~br] = polish_roots(fld, o[c], d[c], t[c], t0[c], t1[c], eps)
        pts = o[idx] + tp[:, None] * d[idx]
        obs = grid.is_observed(pts)
        keep = idx[obs]
        ranges[keep] = tp[obs]
        p_d[keep] = fld.query_drop(pts[obs])
    return ranges, p_d


def render_candidate_background(fld: SdfGridField, grid: OccupancyGrid, ray: Ray, eps=1e-3, max_steps=512):
    r, p = trace_background(fld, grid, ray.origin[None], ray.direction[None], ray.max_range, eps, max_steps)
    return (None if np.isnan(r[0]) else float(r[0])), float(p[0])


def composite_arrays(ranges, p_d):
    """Rows are candidates, columns rays. Returns ``(range or NaN, winning row or -1)``."""
    ranges = np.atleast_2d(np.asarray(ranges, dtype=float))
    p_d = np.atleast_2d(np.asarray(p_d, dtype=float))
    valid = (p_d <= DROP_THRESHOLD) & np.isfinite(ranges)
    masked = np.where(valid, ranges, np.inf)
    win = np.argmin(masked, axis=0)
    best = masked[win, np.arange(masked.shape[1])]
    found = np.isfinite(best)
    return np.where(found, best, np.nan), np.where(found, win, -1)


def composite(candidates):
    """Nearest range among candidates with ``p_d <= 0.5``; None when every candidate drops."""
    if not candidates:
        raise ValueError("need at least one candidate")
    r = [np.nan if c[0] is None else c[0] for c in candidates]
    p = [c[1] for c in candidates]
    best, _ = composite_arrays(np.array(r)[:, None], np.array(p)[:, None])
    return None if np.isnan(best[0]) else float(best[0])


def substitute_missing(track_ids, fitted, seed: int = 0) -> dict:
    """Map each track without a field to a donor drawn uniformly from ``fitted``."""
    fitted = sorted(set(fitted), key=track_sort_key)
    missing = sorted((t for t in set(track_ids) if t not in set(fitted)), key=track_sort_key)
    if not missing:
        return {}
    if not fitted:
        raise NoFields(f"{len(missing)} tracks need a donor but no vehicle field was reconstructed")
    rng = np.random.default_rng(seed)
    return {t: fitted[int(rng.integers(len(fitted)))] for t in missing}


def render_frame(scene: SceneGraph, sensor: SensorModel, frame_id, eps=1e-3, max_steps=128) -> RenderedFrame:
    dirs_s = sensor.directions()
    n = len(dirs_s)
    origin = sensor.pose.translation
    dirs = sensor.pose.apply_vector(dirs_s)
    origins = np.broadcast_to(origin, dirs.shape)
    boxes = sorted(scene.timeline.get(frame_id, []), key=lambda tb: track_sort_key(tb[0]))

    cand_r = [np.full(n, np.nan)]
    cand_p = [np.ones(n)]
    labels = [BACKGROUND]
    if n:
        cand_r[0], cand_p[0] = trace_background(scene.background, scene.occupancy, origins, dirs,
                                                sensor.max_range, eps)
    for tid, box in boxes:
        r = np.full(n, np.nan)
        p = np.ones(n)
        t0, t1, hit = ray_box_intervals(origins, dirs, box, 0.0, sensor.max_range)
        rows = np.flatnonzero(hit)
        if rows.size:
            model, scale = scene.resolve(tid)
            r[rows], p[rows] = trace_vehicle(model.field, scene.to_canonical(tid, box), origins[rows],
                                             dirs[rows], t0[rows], t1[rows], scale, eps, max_steps)
        cand_r.append(r)
        cand_p.append(p)
        labels.append(tid)
    ranges, win = composite_arrays(np.stack(cand_r), np.stack(cand_p))
    sources = np.empty(n, dtype=object)
    for i, lab in enumerate(labels):
        sources[win == i] = lab
    world_to_sensor = sensor.pose.inverse()
    out_boxes = [(tid, world_to_sensor.apply(box.corners())) for tid, box in boxes]
    return RenderedFrame(frame_id, sensor.pattern_shape, dirs_s, ranges, sources, out_boxes)
