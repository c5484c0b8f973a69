"""Compare a rendered frame with a reference scan."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree


class EmptyInput(ValueError):
    pass


@dataclass
class MetricsReport:
    chamfer: float  # mean of the two one-sided mean nearest-neighbor distances
    chamfer_forward: float  # rendered -> reference
    chamfer_backward: float  # reference -> rendered
    range_mae: float  # NaN when no ray hits in both
    matched_rays: int
    drop_accuracy: float
    drop_precision: float
    drop_recall: float
    n_rendered: int
    n_reference: int
    n_rays: int

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in asdict(self).items()}


def one_sided_chamfer(a, b) -> float:
    """Mean distance from each point of ``a`` to its nearest neighbor in ``b``."""
    d, _ = cKDTree(b).query(a)
    return float(np.mean(d))


def chamfer(a, b) -> float:
    return 0.5 * (one_sided_chamfer(a, b) + one_sided_chamfer(b, a))


def _rate(num, den):
    return float(num / den) if den else float("nan")


def evaluate(rendered, reference) -> MetricsReport:
    """Metrics of a :class:`RenderedFrame` against a reference.

    ``reference`` is another rendered frame or a range array over the same scan
    pattern (full metrics), or an ``(N, 3)`` sensor-frame cloud (Chamfer only).
    """
    if hasattr(reference, "ranges"):
        reference = reference.ranges
    ref = np.asarray(reference, dtype=float)
    if ref.ndim == 2 and ref.shape[1] == 3:
        return evaluate_clouds(rendered.points, ref)
    return evaluate_ranges(rendered.ranges, ref, rendered.directions)


def evaluate_ranges(rendered_ranges, reference_ranges, directions=None) -> MetricsReport:
    """Metrics between two range images over the same scan pattern (NaN marks a drop).

    Chamfer uses the points ``range * direction``; range MAE is over rays that
    hit in both; the drop confusion counts a drop as the positive class.
    """
    r = np.asarray(rendered_ranges, dtype=float).ravel()
    g = np.asarray(reference_ranges, dtype=float).ravel()
    if r.shape != g.shape:
        raise ValueError("range arrays must cover the same scan pattern")
    if r.size == 0:
        raise EmptyInput("empty scan pattern")
    if directions is None:
        raise ValueError("directions are required")
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    hr, hg = np.isfinite(r), np.isfinite(g)
    if not hr.any() or not hg.any():
        raise EmptyInput("rendered or reference frame has no points")
    pr, pg = d[hr] * r[hr, None], d[hg] * g[hg, None]
    fwd, bwd = one_sided_chamfer(pr, pg), one_sided_chamfer(pg, pr)
    both = hr & hg
    mae = float(np.mean(np.abs(r[both] - g[both]))) if both.any() else float("nan")
    pred, true = ~hr, ~hg
    tp = int(np.sum(pred & true))
    return MetricsReport(
        chamfer=0.5 * (fwd + bwd), chamfer_forward=fwd, chamfer_backward=bwd,
        range_mae=mae, matched_rays=int(both.sum()),
        drop_accuracy=float(np.mean(pred == true)),
        drop_precision=_rate(tp, pred.sum()), drop_recall=_rate(tp, true.sum()),
        n_rendered=int(hr.sum()), n_reference=int(hg.sum()), n_rays=int(r.size),
    )


def evaluate_clouds(rendered_points, reference_points) -> MetricsReport:
    """Chamfer-only comparison for clouds without a shared scan pattern."""
    a = np.asarray(rendered_points, dtype=float).reshape(-1, 3)
    b = np.asarray(reference_points, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("both clouds must be nonempty")
    fwd, bwd = one_sided_chamfer(a, b), one_sided_chamfer(b, a)
    nan = float("nan")
    return MetricsReport(0.5 * (fwd + bwd), fwd, bwd, nan, 0, nan, nan, nan, len(a), len(b), 0)


def summarize(reports) -> dict:
    """Ray-weighted means over frames (rates and MAE) and per-frame counts."""
    reports = list(reports)
    if not reports:
        return {}
    def wmean(key, weight):
        vals = np.array([getattr(r, key) for r in reports], dtype=float)
        w = np.array([getattr(r, weight) for r in reports], dtype=float)
        ok = np.isfinite(vals) & (w > 0)
        return float(np.sum(vals[ok] * w[ok]) / np.sum(w[ok])) if ok.any() else None
    return {
        "frames": len(reports),
        "chamfer": float(np.mean([r.chamfer for r in reports])),
        "range_mae": wmean("range_mae", "matched_rays"),
        "drop_accuracy": wmean("drop_accuracy", "n_rays"),
        "n_rendered": [r.n_rendered for r in reports],
        "n_reference": [r.n_reference for r in reports],
    }
