"""Turn scans and completed vehicle clouds into labeled ray samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .decomp import EXTRACT_MARGIN, Frame, track_sort_key
from .field import RayBatch
from .geom import OrientedBox, ray_box_intervals
from .occupancy import EmptyCloud

HIT_THRESHOLD = 0.05


@dataclass(frozen=True)
class RingSpec:
    radii: tuple = (4.0, 7.0, 10.0)
    heights: tuple = (0.5, 2.0, 4.0, 7.0)
    origins_per_ring: int = 36
    rays_per_origin: int = 256

    def __post_init__(self):
        if self.origins_per_ring < 1 or self.rays_per_origin < 1:
            raise ValueError("ring counts must be >= 1")
        if not self.radii or not self.heights:
            raise ValueError("need at least one radius and one height")


def scan_to_rays(frame: Frame) -> RayBatch:
    """One hit sample per return, from the sensor origin toward the world-frame point."""
    pts = frame.world_points()
    o = frame.sensor_origin
    v = pts - o
    r = np.linalg.norm(v, axis=1)
    keep = r > 0
    v, r = v[keep], r[keep]
    return RayBatch(np.broadcast_to(o, v.shape), v / r[:, None], r, np.zeros(len(r), bool))


def assign_rays(rays: RayBatch, boxes, margin: float = EXTRACT_MARGIN):
    """Split rays between vehicle tracks and the background.

    A ray whose segment ``[0, range]`` (``[0, inf)`` for drops) touches a box
    inflated by ``margin`` joins that track's set, for every such box. The
    background keeps only rays touching no inflated box, so returns lying on a
    box face never leak into it.
    """
    t_max = np.where(rays.drop, np.inf, rays.ranges)
    touched = np.zeros(len(rays), dtype=bool)
    per_track = {}
    for tid, box in sorted(boxes, key=lambda tb: track_sort_key(tb[0])):
        _, _, hit = ray_box_intervals(rays.origins, rays.directions, box, 0.0, t_max, margin)
        per_track[tid] = rays[hit]
        touched |= hit
    bg = ~touched
    ends = bg & rays.hit
    if ends.any() and boxes:
        pts = rays[ends].endpoints()
        inside = np.zeros(len(pts), dtype=bool)
        for _, box in boxes:
            inside |= box.contains(pts, margin)
        bg[np.flatnonzero(ends)[inside]] = False
    return per_track, rays[bg]


def ring_ray_origins(box: OrientedBox, spec: RingSpec = RingSpec()) -> np.ndarray:
    """Origins on horizontal rings around ``box``: radius-major, then height, then azimuth.

    Azimuth 0 is the box heading; heights are relative to the box center.
    """
    half_diag = np.linalg.norm(box.size) / 2.0
    if min(spec.radii) <= half_diag:
        raise ValueError(f"ring radius must exceed the box half-diagonal {half_diag:.3f} m")
    az = 2.0 * np.pi * np.arange(spec.origins_per_ring) / spec.origins_per_ring
    local = [
        np.stack([r * np.cos(az), r * np.sin(az), np.full_like(az, h)], axis=1)
        for r in spec.radii
        for h in spec.heights
    ]
    return box.pose.apply(np.concatenate(local))


def stratified_box_targets(n, size, rng) -> np.ndarray:
    """``n`` jittered points from distinct strata of a centered box of ``size``."""
    m = int(np.ceil(n ** (1.0 / 3.0)))
    cells = np.stack(np.meshgrid(*[np.arange(m)] * 3, indexing="ij"), -1).reshape(-1, 3)
    cells = cells[rng.permutation(len(cells))[:n]]
    u = (cells + rng.random((n, 3))) / m
    return (u - 0.5) * np.asarray(size)


def first_hits(origins, directions, cloud, hit_threshold=HIT_THRESHOLD, tree=None):
    """Per ray: whether some cloud point ahead of the origin lies within ``hit_threshold``
    of the ray line, and the smallest along-ray projection among such points.

    Candidates come from k-d tree ball queries at samples spaced ``hit_threshold``
    along the part of each ray that passes near the cloud.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    n = len(o)
    rng_out = np.full(n, np.nan)
    if n == 0 or len(cloud) == 0:
        return np.zeros(n, bool), rng_out
    tree = cKDTree(cloud) if tree is None else tree
    lo, hi = cloud.min(0) - hit_threshold, cloud.max(0) + hit_threshold
    aabb = OrientedBox((lo + hi) / 2, hi - lo, 0.0)
    ta, tb, near = ray_box_intervals(o, d, aabb, 0.0, np.inf)
    step = hit_threshold
    radius = np.hypot(hit_threshold, step / 2.0) * (1 + 1e-9)
    rows = np.flatnonzero(near)
    counts = np.floor((tb[rows] - ta[rows]) / step).astype(np.int64) + 2
    ray_of = np.repeat(rows, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ts = ta[ray_of] + offs * step
    samples = o[ray_of] + ts[:, None] * d[ray_of]
    has = tree.query_ball_point(samples, radius, return_length=True) > 0
    if not has.any():
        return np.zeros(n, bool), rng_out
    lists = tree.query_ball_point(samples[has], radius)
    lens = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    pidx = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
    ridx = np.repeat(ray_of[has], lens)
    rel = cloud[pidx] - o[ridx]
    proj = (rel * d[ridx]).sum(1)
    perp2 = (rel * rel).sum(1) - proj ** 2
    ok = (proj > 0) & (perp2 < hit_threshold ** 2)
    best = np.full(n, np.inf)
    np.minimum.at(best, ridx[ok], proj[ok])
    hit = np.isfinite(best)
    rng_out[hit] = best[hit]
    return hit, rng_out


def sample_vehicle_rays(cloud, box: OrientedBox, spec: RingSpec = RingSpec(),
                        hit_threshold: float = HIT_THRESHOLD, seed: int = 0) -> RayBatch:
    """Ring-sampled hit/drop rays around a canonical vehicle cloud.

    ``cloud`` is in the box-local (canonical) frame and so are the returned
    rays; only the box size is used. Each origin shoots toward stratified
    jittered targets inside the box.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise EmptyCloud("vehicle cloud is empty")
    local = OrientedBox(np.zeros(3), box.size, 0.0)
    origins = ring_ray_origins(local, spec)
    rng = np.random.default_rng(seed)
    targets = np.concatenate([stratified_box_targets(spec.rays_per_origin, box.size, rng) for _ in origins])
    o = np.repeat(origins, spec.rays_per_origin, axis=0)
    v = targets - o
    d = v / np.linalg.norm(v, axis=1, keepdims=True)
    hit, ranges = first_hits(o, d, cloud, hit_threshold)
    return RayBatch(o, d, ranges, ~hit)
