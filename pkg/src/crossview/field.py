"""Explicit trilinear SDF + ray-drop grid fields and their fitting.

A :class:`SdfGridField` stores one signed distance value and one drop logit
per grid node. Queries interpolate trilinearly; everything is linear in the
node parameters, so the loss gradients are assembled by hand and scattered
back with ``np.bincount`` (fixed summation order, hence reproducible).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import OrientedBox, Ray, RigidTransform, ray_box_intervals

log = logging.getLogger(__name__)

# p_d := 1 is represented by this logit so BCE stays finite.
LOGIT_CAP = float(np.log((1 - 1e-7) / 1e-7))

_BITS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])


class NoConvergedRays(RuntimeError):
    pass


class Diverged(RuntimeError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


@dataclass(eq=False)
class RayBatch:
    """Struct-of-arrays container of ray samples.

    ``ranges`` is NaN for drop samples. Hit samples have ``drop == False`` and a
    finite positive range.
    """

    origins: np.ndarray
    directions: np.ndarray
    ranges: np.ndarray
    drop: np.ndarray

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=float).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=float).reshape(-1, 3)
        self.ranges = np.asarray(self.ranges, dtype=float).reshape(-1)
        self.drop = np.asarray(self.drop, dtype=bool).reshape(-1)
        n = len(self.origins)
        if not (len(self.directions) == len(self.ranges) == len(self.drop) == n):
            raise ValueError("ray batch arrays have mismatched lengths")

    @classmethod
    def empty(cls) -> RayBatch:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, bool))

    @classmethod
    def concat(cls, batches) -> RayBatch:
        batches = list(batches)
        if not batches:
            return cls.empty()
        return cls(
            np.concatenate([b.origins for b in batches]),
            np.concatenate([b.directions for b in batches]),
            np.concatenate([b.ranges for b in batches]),
            np.concatenate([b.drop for b in batches]),
        )

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, idx) -> RayBatch:
        return RayBatch(self.origins[idx], self.directions[idx], self.ranges[idx], self.drop[idx])

    @property
    def hit(self) -> np.ndarray:
        return ~self.drop

    def endpoints(self) -> np.ndarray:
        return self.origins + self.ranges[:, None] * self.directions

    def transformed(self, t: RigidTransform) -> RayBatch:
        return RayBatch(t.apply(self.origins), t.apply_vector(self.directions), self.ranges, self.drop)


@dataclass(frozen=True)
class LossWeights:
    w_zeta: float = 1.0
    w_s: float = 1.0
    w_eik: float = 0.1
    w_drop: float = 0.5

    def __post_init__(self):
        w = np.array([self.w_zeta, self.w_s, self.w_eik, self.w_drop])
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("loss weights must be non-negative and not all zero")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 200
    learning_rate: float = 1e-3
    drop_learning_rate: float = 1e-2
    final_lr_ratio: float = 0.01  # both rates decay geometrically to this fraction by the last iteration
    batch_size: int = 4096
    eikonal_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (self.learning_rate > 0 and self.drop_learning_rate > 0):
            raise ValueError("learning rates must be positive")
        if not 0 < self.final_lr_ratio <= 1:
            raise ValueError("final_lr_ratio must be in (0, 1]")


@dataclass(eq=False)
class SdfGridField:
    """Node-valued grid over the axis-aligned box ``[lo, hi]``.

    Node ``(i, j, k)`` sits at ``lo + (i, j, k) * spacing``; arrays are indexed
    ``[i, j, k]``. Queries outside the bounds use the border values.
    """

    lo: np.ndarray
    hi: np.ndarray
    sdf: np.ndarray
    drop_logits: np.ndarray
    truncation: float

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(3)
        self.hi = np.asarray(self.hi, dtype=float).reshape(3)
        self.sdf = np.asarray(self.sdf, dtype=float)
        self.drop_logits = np.asarray(self.drop_logits, dtype=float)
        self.truncation = float(self.truncation)
        if self.sdf.ndim != 3 or min(self.sdf.shape) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if self.drop_logits.shape != self.sdf.shape:
            raise ValueError("sdf and drop logit grids differ in shape")
        if not np.all(self.hi > self.lo):
            raise ValueError("empty bounds")

    @classmethod
    def from_function(cls, sdf_fn, lo, hi, voxel_size, truncation=None, logit_fn=None) -> SdfGridField:
        """Sample an analytic SDF (and optional logit function) on a grid."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        res = np.maximum(np.ceil((hi - lo) / voxel_size - 1e-9).astype(int) + 1, 2)
        hi = lo + (res - 1) * voxel_size
        trunc = 4.0 * voxel_size if truncation is None else truncation
        nodes = _node_coords(lo, res, voxel_size)
        s = np.clip(sdf_fn(nodes), -trunc, trunc).reshape(res)
        z = np.zeros(res) if logit_fn is None else logit_fn(nodes).reshape(res)
        return cls(lo, hi, s, z, trunc)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.sdf.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.sdf.shape) - 1)

    @property
    def voxel_size(self) -> float:
        return float(self.spacing.min())

    @property
    def bounds_box(self) -> OrientedBox:
        return OrientedBox((self.lo + self.hi) / 2.0, self.hi - self.lo, 0.0)

    def node_coords(self) -> np.ndarray:
        return self.lo + np.stack(
            np.meshgrid(*[np.arange(n) for n in self.sdf.shape], indexing="ij"), axis=-1
        ).reshape(-1, 3) * self.spacing

    def copy(self) -> SdfGridField:
        return SdfGridField(self.lo.copy(), self.hi.copy(), self.sdf.copy(), self.drop_logits.copy(), self.truncation)

    def cells(self, points, with_grad=False):
        """Flat corner indices ``(N, 8)``, weights ``(N, 8)`` and optionally d(weights)/dp ``(N, 8, 3)``."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        res = np.array(self.sdf.shape)
        h = self.spacing
        u = (p - self.lo) / h
        inside = (u >= 0) & (u <= res - 1)
        u = np.clip(u, 0, res - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
        f = u - i0
        corner = i0[:, None, :] + _BITS[None]
        flat = (corner[..., 0] * res[1] + corner[..., 1]) * res[2] + corner[..., 2]
        fac = np.where(_BITS[None], f[:, None, :], 1.0 - f[:, None, :])
        w = fac.prod(axis=-1)
        if not with_grad:
            return flat, w
        dfac = np.where(_BITS[None], 1.0, -1.0) * (inside / h)[:, None, :]
        dw = np.empty(w.shape + (3,))
        dw[..., 0] = dfac[..., 0] * fac[..., 1] * fac[..., 2]
        dw[..., 1] = fac[..., 0] * dfac[..., 1] * fac[..., 2]
        dw[..., 2] = fac[..., 0] * fac[..., 1] * dfac[..., 2]
        return flat, w, dw

    def query_sdf(self, points) -> np.ndarray:
        flat, w = self.cells(points)
        out = (self.sdf.ravel()[flat] * w).sum(axis=1)
        return out if np.ndim(points) > 1 else out[0]

    def query_sdf_gradient(self, points) -> np.ndarray:
        flat, _, dw = self.cells(points, with_grad=True)
        out = np.einsum("nc,ncd->nd", self.sdf.ravel()[flat], dw)
        return out if np.ndim(points) > 1 else out[0]

    def query_logit(self, points) -> np.ndarray:
        flat, w = self.cells(points)
        out = (self.drop_logits.ravel()[flat] * w).sum(axis=1)
        return out if np.ndim(points) > 1 else out[0]

    def query_drop(self, points) -> np.ndarray:
        return sigmoid(self.query_logit(points))


def _node_coords(lo, res, h):
    grids = np.meshgrid(*[np.arange(n) for n in res], indexing="ij")
    return lo + np.stack(grids, axis=-1).reshape(-1, 3) * h


# ---------------------------------------------------------------------------
# sphere tracing
# ---------------------------------------------------------------------------


@dataclass
class TraceResult:
    t: np.ndarray
    hit: np.ndarray
    at_entry: np.ndarray
    steps: int = 0


def trace_rays(fld: SdfGridField, origins, directions, t_min=0.0, t_max=np.inf,
               eps=1e-3, max_steps=128, polish_steps=4) -> TraceResult:
    """Sphere-trace rays through ``fld`` starting at the bounds entry.

    ``t`` is in units of the given (possibly non-unit) directions; each step
    advances by ``s / |d|``. A ray whose first sample is already inside the
    surface converges at its entry point (``at_entry``). A step that lands
    inside (the field is steeper than a distance) brackets the crossing, which
    is then found by bisection. Hits within ``eps`` are refined by a few Newton
    steps so the returned range is the root of the trilinear field.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = len(o)
    speed = np.linalg.norm(d, axis=1)
    t0, t1, ok = ray_box_intervals(o, d, fld.bounds_box, t_min, t_max)
    t = np.where(ok, t0, np.nan)
    t_out = np.full(n, np.nan)  # last sample with s > 0
    hit = np.zeros(n, bool)
    at_entry = np.zeros(n, bool)
    bracketed = np.zeros(n, bool)
    active = np.flatnonzero(ok)
    steps = 0
    while active.size and steps < max_steps:
        steps += 1
        ta = t[active]
        s = fld.query_sdf(o[active] + ta[:, None] * d[active])
        conv = np.abs(s) < eps
        neg = (~conv) & (s < 0)
        inside = neg & np.isnan(t_out[active])
        crossed = neg & ~inside
        hit[active[conv | neg]] = True
        at_entry[active[inside]] = True
        bracketed[active[crossed]] = True
        t_out[active[~neg]] = ta[~neg]
        # the last step is clamped to the exit so a crossing just before it is still sampled
        tn = np.minimum(ta + np.maximum(s, 0.0) / speed[active], t1[active])
        t[active[~conv & ~neg]] = tn[~conv & ~neg]
        keep = (~conv) & (~neg) & (ta < t1[active])
        active = active[keep]
    hit &= ok
    idx = np.flatnonzero(bracketed)
    if idx.size:
        t[idx] = bisect_roots(fld, o[idx], d[idx], t_out[idx], t[idx])
    t[~hit] = np.nan
    idx = np.flatnonzero(hit & ~at_entry & ~bracketed)
    if polish_steps and idx.size:
        t[idx] = polish_roots(fld, o[idx], d[idx], t[idx], t0[idx], t1[idx], eps, polish_steps)
    return TraceResult(t, hit, at_entry, steps)


def bisect_roots(fld: SdfGridField, o, d, t_pos, t_neg, iterations=40):
    """Crossing of ``s`` between ``t_pos`` (s > 0) and ``t_neg`` (s < 0), by bisection."""
    lo = np.array(t_pos, dtype=float)
    hi = np.array(t_neg, dtype=float)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        pos = fld.query_sdf(o + mid[:, None] * d) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return 0.5 * (lo + hi)


def polish_roots(fld: SdfGridField, o, d, t, t_lo, t_hi, eps=1e-3, steps=4):
    """Newton-refine ``s(o + t d) = 0``; a ray keeps its input ``t`` if refinement wanders off."""
    tp = np.array(t, dtype=float)
    for _ in range(steps):
        flat, w, dw = fld.cells(o + tp[:, None] * d, with_grad=True)
        vals = fld.sdf.ravel()[flat]
        s = (vals * w).sum(1)
        slope = (np.einsum("nc,ncd->nd", vals, dw) * d).sum(1)
        safe = np.abs(slope) > 1e-9
        tp = tp - np.where(safe, s / np.where(safe, slope, 1.0), 0.0)
    speed = np.linalg.norm(d, axis=1)
    good = (np.abs(tp - t) <= 10 * eps / speed) & (tp >= t_lo) & (tp <= t_hi)
    return np.where(good, tp, t)


@dataclass
class CanonicalHit:
    range: float | None
    sdf: float | None
    drop: float


def canonical_query(fld: SdfGridField, transform: RigidTransform, ray: Ray, scale=None,
                    t_min=0.0, t_max=None, eps=1e-3, max_steps=128) -> CanonicalHit:
    """Evaluate a canonical-space field along a world ray mapped by ``transform``.

    ``scale`` optionally stretches canonical coordinates per axis after the
    rigid map (used when a donor field stands in for a differently sized box).
    The returned range is in the caller's (world) units. No convergence means
    ``p_d = 1``.
    """
    o = transform.apply(ray.origin)
    d = transform.apply_vector(ray.direction)
    if scale is not None:
        o, d = o * scale, d * scale
    tr = trace_rays(fld, o[None], d[None], t_min, ray.max_range if t_max is None else t_max, eps, max_steps)
    if not tr.hit[0]:
        return CanonicalHit(None, None, 1.0)
    p = o + tr.t[0] * d
    return CanonicalHit(float(tr.t[0]), float(fld.query_sdf(p)), float(fld.query_drop(p)))


def range_gradient(fld: SdfGridField, origin, direction, t_min=0.0, t_max=np.inf, eps=1e-3, max_steps=128):
    """Traced range of one ray and its derivative w.r.t. every SDF node value.

    At a root ``s(o + r d) = 0`` the implicit function theorem gives
    ``dr/dtheta = -w(p) / (grad s(p) . d)`` where ``w`` are the trilinear
    weights of the hit cell. Returns ``(None, None)`` on a miss, when the
    ray starts inside the surface (the range is then pinned to the entry), or
    when the hit is a grazing near-miss accepted by the ``eps`` test without
    an actual zero crossing.
    """
    o = np.asarray(origin, dtype=float).reshape(1, 3)
    d = np.asarray(direction, dtype=float).reshape(1, 3)
    tr = trace_rays(fld, o, d, t_min, t_max, eps, max_steps)
    if not tr.hit[0] or tr.at_entry[0]:
        return None, None
    r = float(tr.t[0])
    flat, w, dw = fld.cells(o + r * d, with_grad=True)
    vals = fld.sdf.ravel()[flat]
    slope = float((np.einsum("nc,ncd->nd", vals, dw) * d).sum())
    if abs(slope) < 1e-12 or abs(float((vals * w).sum())) > 1e-9 * max(1.0, fld.truncation):
        return None, None
    grad = np.zeros(fld.sdf.size)
    np.add.at(grad, flat[0], -w[0] / slope)
    return r, grad.reshape(fld.sdf.shape)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge(logits, labels):
    """Binary Lovasz hinge over a flat batch; returns ``(loss, dloss/dlogits)``.

    ``labels`` are 1 for the positive (drop) class.
    """
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    if z.size == 0:
        return 0.0, np.zeros(0)
    signs = 2.0 * y - 1.0
    errors = 1.0 - z * signs
    order = np.argsort(-errors, kind="stable")
    g = lovasz_grad(y[order])
    e_sorted = errors[order]
    loss = float(np.dot(np.maximum(e_sorted, 0.0), g))
    grad = np.zeros_like(z)
    grad[order] = np.where(e_sorted > 0, g, 0.0) * -signs[order]
    return loss, grad


def bce_with_logits(logits, labels):
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    if z.size == 0:
        return 0.0, np.zeros(0)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return loss, (sigmoid(z) - y) / z.size


@dataclass
class LossResult:
    total: float
    terms: dict
    grad_sdf: np.ndarray
    grad_logits: np.ndarray
    n_converged: int = 0


def _scatter(flat, coef, size):
    return np.bincount(flat.ravel(), weights=coef.ravel(), minlength=size)


def _drop_probe_points(fld, origins, directions, n_samples=64):
    """Per ray, the point of minimum |s| among uniform samples inside the bounds."""
    t0, t1, ok = ray_box_intervals(origins, directions, fld.bounds_box, 0.0, np.inf)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return idx, np.zeros((0, 3))
    frac = (np.arange(n_samples) + 0.5) / n_samples
    ts = t0[idx, None] + (t1[idx] - t0[idx])[:, None] * frac[None]
    pts = origins[idx, None, :] + ts[..., None] * directions[idx, None, :]
    s = fld.query_sdf(pts.reshape(-1, 3)).reshape(len(idx), n_samples)
    best = np.argmin(np.abs(s), axis=1)
    return idx, pts[np.arange(len(idx)), best]


def loss_total(fld: SdfGridField, batch: RayBatch, weights: LossWeights = LossWeights(),
               eikonal_points=None, rng=None, eikonal_samples=1024,
               eps=1e-3, max_steps=128, require_convergence=True) -> LossResult:
    """Four-term loss (range L1, surface SDF, Eikonal, drop BCE+Lovasz) and its gradient.

    Eikonal points default to uniform samples in the bounds drawn from ``rng``;
    points whose cell touches a truncated node are skipped since the clamp
    pins the gradient there.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    size = fld.sdf.size
    sdf_flat = fld.sdf.ravel()
    g_sdf = np.zeros(size)
    g_logit = np.zeros(size)
    terms = {}

    hit_idx = np.flatnonzero(batch.hit)
    # surface term
    if hit_idx.size:
        flat, w = fld.cells(batch[hit_idx].endpoints())
        s = (sdf_flat[flat] * w).sum(1)
        terms["surface"] = float(np.mean(np.abs(s)))
        g_sdf += weights.w_s * _scatter(flat, np.sign(s)[:, None] * w / hit_idx.size, size)
    else:
        terms["surface"] = 0.0

    # range term via implicit differentiation at the traced root
    o = batch.origins[hit_idx]
    d = batch.directions[hit_idx]
    tr = trace_rays(fld, o, d, 0.0, np.inf, eps, max_steps)
    conv = np.flatnonzero(tr.hit)
    if hit_idx.size and conv.size == 0 and require_convergence:
        raise NoConvergedRays("sphere tracing did not converge for any hit ray")
    hit_logits = np.full(hit_idx.size, LOGIT_CAP)
    hit_cells = None
    if conv.size:
        r_hat = tr.t[conv]
        resid = r_hat - batch.ranges[hit_idx[conv]]
        terms["range"] = float(np.mean(np.abs(resid)))
        p = o[conv] + r_hat[:, None] * d[conv]
        flat, w, dw = fld.cells(p, with_grad=True)
        grad_s = np.einsum("nc,ncd->nd", sdf_flat[flat], dw)
        slope = (grad_s * d[conv]).sum(1)
        use = (~tr.at_entry[conv]) & (slope < -1e-6)
        coef = np.where(use, -np.sign(resid) / np.where(use, slope, -1.0), 0.0) / conv.size
        g_sdf += weights.w_zeta * _scatter(flat, coef[:, None] * w, size)
        hit_logits[conv] = (fld.drop_logits.ravel()[flat] * w).sum(1)
        hit_cells = (flat, w)
    else:
        terms["range"] = 0.0

    # eikonal term
    if eikonal_points is None:
        rng = np.random.default_rng() if rng is None else rng
        eikonal_points = rng.uniform(fld.lo, fld.hi, size=(eikonal_samples, 3))
    flat, _, dw = fld.cells(eikonal_points, with_grad=True)
    vals = sdf_flat[flat]
    valid = np.all(np.abs(vals) < fld.truncation * (1 - 1e-9), axis=1)
    if valid.any():
        flat, vals, dw = flat[valid], vals[valid], dw[valid]
        g = np.einsum("nc,ncd->nd", vals, dw)
        norm = np.linalg.norm(g, axis=1)
        terms["eikonal"] = float(np.mean((norm - 1.0) ** 2))
        k = np.where(norm > 0, 2.0 * (norm - 1.0) / np.where(norm > 0, norm, 1.0), 0.0) / len(norm)
        coef = k[:, None] * np.einsum("nd,ncd->nc", g, dw)
        g_sdf += weights.w_eik * _scatter(flat, coef, size)
    else:
        terms["eikonal"] = 0.0

    # drop term over all rays in the batch
    drop_idx = np.flatnonzero(batch.drop)
    probe_rows, probe_pts = _drop_probe_points(fld, batch.origins[drop_idx], batch.directions[drop_idx])
    drop_logits = np.full(drop_idx.size, LOGIT_CAP)
    probe_cells = None
    if probe_rows.size:
        pf, pw = fld.cells(probe_pts)
        drop_logits[probe_rows] = (fld.drop_logits.ravel()[pf] * pw).sum(1)
        probe_cells = (pf, pw)
    z = np.concatenate([hit_logits, drop_logits])
    y = np.concatenate([np.zeros(hit_idx.size), np.ones(drop_idx.size)])
    bce, g_bce = bce_with_logits(z, y)
    lov, g_lov = lovasz_hinge(z, y)
    terms["bce"] = bce
    terms["lovasz"] = lov
    terms["drop"] = bce + lov
    gz = weights.w_drop * (g_bce + g_lov)
    if hit_cells is not None:
        g_logit += _scatter(hit_cells[0], gz[:hit_idx.size][conv][:, None] * hit_cells[1], size)
    if probe_cells is not None:
        g_logit += _scatter(probe_cells[0], gz[hit_idx.size:][probe_rows][:, None] * probe_cells[1], size)

    total = (weights.w_zeta * terms["range"] + weights.w_s * terms["surface"]
             + weights.w_eik * terms["eikonal"] + weights.w_drop * terms["drop"])
    return LossResult(float(total), terms, g_sdf.reshape(fld.sdf.shape),
                      g_logit.reshape(fld.sdf.shape), int(conv.size))


# ---------------------------------------------------------------------------
# initialization and fitting
# ---------------------------------------------------------------------------


def estimate_normals(points, view_dirs, k=16, coarse_voxel=None, line_ratio=0.05):
    """PCA normals oriented against the viewing direction.

    Where the ``k`` nearest points are nearly collinear (a single scan line on
    sparse far ground) the normal is undetermined; if ``coarse_voxel`` is given
    those points take the normal of the nearest voxel centroid instead,
    estimated from ``k`` neighboring centroids.
    """
    points = np.asarray(points, dtype=float)
    view_dirs = np.broadcast_to(np.asarray(view_dirs, dtype=float), points.shape)
    normals, line_like = _pca_normals(points, k, line_ratio)
    if coarse_voxel and line_like.any():
        keys = np.floor(points / coarse_voxel).astype(np.int64)
        _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        cent = np.stack([np.bincount(inv, weights=points[:, a]) for a in range(3)], 1) / counts[:, None]
        coarse, _ = _pca_normals(cent, k, line_ratio)
        _, j = cKDTree(cent).query(points[line_like])
        normals[line_like] = coarse[j]
    flip = (normals * view_dirs).sum(1) > 0
    normals[flip] *= -1.0
    return normals


def _pca_normals(points, k, line_ratio):
    n = len(points)
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1)), np.ones(n, bool)
    k = min(k, n)
    _, nbr = cKDTree(points).query(points, k=k)
    q = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", q, q)
    vals, vecs = np.linalg.eigh(cov)
    line_like = vals[:, 1] < line_ratio * vals[:, 2]
    return vecs[:, :, 0].copy(), line_like


def initialize_field(samples: RayBatch, voxel_size: float, truncation=None, bounds=None,
                     support=None, drop_radius=None) -> SdfGridField:
    """Coarse field from hit endpoints: smoothed point-to-plane signed distance.

    Distances grow with the Euclidean gap once a node is farther than
    ``support`` from every endpoint, so surfaces do not extend past the data.
    Drop logits start negative near endpoints and positive elsewhere.
    """
    hits = samples[samples.hit]
    if len(hits) == 0:
        raise ValueError("need at least one hit sample")
    pts = hits.endpoints()
    trunc = 4.0 * voxel_size if truncation is None else float(truncation)
    support = 3.0 * voxel_size if support is None else support
    drop_radius = 3.0 * voxel_size if drop_radius is None else drop_radius
    if bounds is None:
        pad = trunc + 2.0 * voxel_size
        lo, hi = pts.min(0) - pad, pts.max(0) + pad
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    res = np.maximum(np.ceil((hi - lo) / voxel_size - 1e-9).astype(int) + 1, 2)
    hi = lo + (res - 1) * voxel_size
    normals = estimate_normals(pts, hits.directions, coarse_voxel=4.0 * voxel_size)
    nodes = _node_coords(lo, res, voxel_size)
    k = min(8, len(pts))
    dist, nbr = cKDTree(pts).query(nodes, k=k)
    dist = dist.reshape(len(nodes), k)
    nbr = nbr.reshape(len(nodes), k)
    sigma = 1.5 * voxel_size
    wts = np.exp(-(dist ** 2 - dist[:, :1] ** 2) / sigma ** 2)
    plane = ((nodes[:, None, :] - pts[nbr]) * normals[nbr]).sum(-1)
    s = (wts * plane).sum(1) / wts.sum(1)
    sign = np.where(s >= 0, 1.0, -1.0)
    s = sign * np.maximum(np.abs(s), dist[:, 0] - support)
    s = np.clip(s, -trunc, trunc).reshape(res)
    z = np.clip(4.0 * (dist[:, 0] - drop_radius) / drop_radius, -4.0, 4.0).reshape(res)
    return SdfGridField(lo, hi, s, z, trunc)


def fit_field(samples: RayBatch, config: FitConfig = FitConfig(), weights: LossWeights = LossWeights(),
              init: SdfGridField | None = None, voxel_size: float = 0.2, bounds=None,
              history: list | None = None, eps=1e-3, max_steps=128) -> SdfGridField:
    """Mini-batch Adam on the four-term loss, starting from ``init`` (or :func:`initialize_field`)."""
    if not np.any(samples.hit):
        raise ValueError("need at least one hit sample")
    fld = initialize_field(samples, voxel_size, bounds=bounds) if init is None else init.copy()
    if config.iterations == 0:
        return fld
    rng = np.random.default_rng(config.seed)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    m_s = np.zeros_like(fld.sdf)
    v_s = np.zeros_like(fld.sdf)
    m_z = np.zeros_like(fld.sdf)
    v_z = np.zeros_like(fld.sdf)
    n = len(samples)
    for it in range(1, config.iterations + 1):
        if n > config.batch_size:
            idx = np.sort(rng.choice(n, config.batch_size, replace=False))
            batch = samples[idx]
        else:
            batch = samples
        res = loss_total(fld, batch, weights, rng=rng, eikonal_samples=config.eikonal_samples,
                         eps=eps, max_steps=max_steps, require_convergence=False)
        if not np.isfinite(res.total):
            raise Diverged(f"loss became non-finite at iteration {it}")
        if history is not None:
            history.append(res.total)
        bc1 = 1.0 - b1 ** it
        bc2 = 1.0 - b2 ** it
        decay = config.final_lr_ratio ** ((it - 1) / max(config.iterations - 1, 1))
        for param, grad, m, v, lr in ((fld.sdf, res.grad_sdf, m_s, v_s, config.learning_rate * decay),
                                      (fld.drop_logits, res.grad_logits, m_z, v_z,
                                       config.drop_learning_rate * decay)):
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            param -= lr * (m / bc1) / (np.sqrt(v / bc2) + adam_eps)
        np.clip(fld.sdf, -fld.truncation, fld.truncation, out=fld.sdf)
        if not (np.all(np.isfinite(fld.sdf)) and np.all(np.isfinite(fld.drop_logits))):
            raise Diverged(f"parameters became non-finite at iteration {it}")
        if it % 100 == 0:
            log.debug("iter %d loss %.5f %s", it, res.total, {k: round(v, 5) for k, v in res.terms.items()})
    return fld


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

FIELD_MAGIC = b"XVSDF\x00\x00\x00"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<8sI6d3Id")


def field_to_bytes(fld: SdfGridField) -> bytes:
    """Header then SDF values then drop logits, float32 little-endian, x fastest."""
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, *fld.lo, *fld.hi, *fld.sdf.shape, fld.truncation)
    body = [a.astype("<f4").ravel(order="F").tobytes() for a in (fld.sdf, fld.drop_logits)]
    return header + b"".join(body)


def field_from_bytes(data: bytes) -> SdfGridField:
    if len(data) < _FIELD_HEADER.size:
        raise ValueError("truncated field header")
    magic, version, *rest = _FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise ValueError("not a field file")
    if version != FIELD_VERSION:
        raise ValueError(f"unsupported field version {version}")
    lo, hi = np.array(rest[:3]), np.array(rest[3:6])
    res = tuple(rest[6:9])
    trunc = rest[9]
    n = int(np.prod(res))
    expected = _FIELD_HEADER.size + 8 * n
    if len(data) != expected:
        raise ValueError(f"field payload has {len(data)} bytes, expected {expected}")
    vals = np.frombuffer(data, dtype="<f4", offset=_FIELD_HEADER.size).astype(float)
    sdf = vals[:n].reshape(res, order="F")
    logits = vals[n:].reshape(res, order="F")
    return SdfGridField(lo, hi, sdf, logits, trunc)


def save_field(fld: SdfGridField, path) -> None:
    Path(path).write_bytes(field_to_bytes(fld))


def load_field(path) -> SdfGridField:
    return field_from_bytes(Path(path).read_bytes())
