"""Fit a grid SDF to rays cast at a unit sphere, then look at what came out.

Run with ``python demos/sphere_field.py``. Takes about ten seconds.
"""

import numpy as np

from crossview.field import FitConfig, RayBatch, fit_field, range_gradient, trace_rays
from crossview.geom import normalize

rng = np.random.default_rng(0)

# Rays from the eight corners of a 6 m cube, aimed loosely at the origin.
corners = np.array([[x, y, z] for x in (-3, 3) for y in (-3, 3) for z in (-3, 3)], float)
o = corners[rng.integers(0, 8, 10000)]
d = normalize(rng.normal(size=(10000, 3)) * 0.5 - o)

# Analytic ranges to the unit sphere; rays that miss become drop samples.
b = (o * d).sum(1)
disc = b * b - ((o * o).sum(1) - 1)
r = np.where(disc > 0, -b - np.sqrt(np.abs(disc)), np.nan)
rays = RayBatch(o, d, r, np.isnan(r))
print(f"{rays.hit.sum()} hit rays, {rays.drop.sum()} drop rays")

history = []
fld = fit_field(rays, FitConfig(iterations=200), voxel_size=0.1, bounds=([-1.6] * 3, [1.6] * 3), history=history)
print(f"batch loss: {history[0]:.4f} at the first iteration, {history[-1]:.4f} at the last")

# Re-trace the hit rays through the fitted field.
tr = trace_rays(fld, o[rays.hit], d[rays.hit])
err = np.abs(tr.t - r[rays.hit])
print(f"re-traced range error: median {np.median(err) * 1000:.2f} mm, max {np.nanmax(err) * 1000:.2f} mm")

# Gradient norm on the near-surface shell.
delta = rng.uniform(-fld.truncation, fld.truncation, (10000, 1))
shell = normalize(rng.normal(size=(10000, 3))) * (1 + delta)
dev = np.abs(np.linalg.norm(fld.query_sdf_gradient(shell), axis=1) - 1)
print(f"mean | |grad s| - 1 | on the shell: {dev.mean():.4f}")

# How the range of one ray responds to each grid value it depends on.
rng_val, grad = range_gradient(fld, np.array([-3.0, 0.13, 0.27]), np.array([1.0, 0.0, 0.0]))
nz = np.flatnonzero(grad)
print(f"one ray: range {rng_val:.4f} m depends on {nz.size} grid nodes, d(range)/d(sdf) sums to {grad.sum():.3f}")
