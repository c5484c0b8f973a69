import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import lovasz_by_thresholds, sphere_hits, sphere_sdf
from scipy.interpolate import RegularGridInterpolator

from crossview.field import (
    LOGIT_CAP,
    Diverged,
    NoConvergedRays,
    FitConfig,
    LossWeights,
    RayBatch,
    SdfGridField,
    bce_with_logits,
    canonical_query,
    field_from_bytes,
    field_to_bytes,
    fit_field,
    initialize_field,
    load_field,
    loss_total,
    lovasz_hinge,
    range_gradient,
    save_field,
    trace_rays,
)
from crossview.geom import Ray, RigidTransform, normalize


def random_field(seed=0, res=(5, 6, 7)):
    rng = np.random.default_rng(seed)
    return SdfGridField((-1, -2, 0), (1, 1, 2), rng.normal(size=res), rng.normal(size=res), 10.0)


def sphere_field(voxel=0.1, radius=0.6, half=1.0):
    return SdfGridField.from_function(sphere_sdf(radius=radius), [-half] * 3, [half] * 3, voxel)


def sphere_rays(n, seed=0, radius=0.6, spread=0.3, dist=3.0):
    rng = np.random.default_rng(seed)
    o = normalize(rng.normal(size=(n, 3))) * dist
    d = normalize(rng.normal(size=(n, 3)) * spread - o)
    return o, d, sphere_hits(o, d, radius=radius)


# --- interpolation ------------------------------------------------------------------------

def test_trilinear_matches_scipy():
    fld = random_field()
    axes = [np.linspace(fld.lo[a], fld.hi[a], fld.resolution[a]) for a in range(3)]
    ref = RegularGridInterpolator(axes, fld.sdf, method="linear")
    pts = np.random.default_rng(1).uniform(fld.lo, fld.hi, (500, 3))
    np.testing.assert_allclose(fld.query_sdf(pts), ref(pts), atol=1e-12)
    ref_z = RegularGridInterpolator(axes, fld.drop_logits, method="linear")
    np.testing.assert_allclose(fld.query_logit(pts), ref_z(pts), atol=1e-12)


def test_gradient_matches_central_differences():
    fld = random_field(2)
    pts = np.random.default_rng(3).uniform(fld.lo + 0.05, fld.hi - 0.05, (200, 3))
    h = 1e-6
    fd = np.stack([(fld.query_sdf(pts + h * e) - fld.query_sdf(pts - h * e)) / (2 * h) for e in np.eye(3)], 1)
    np.testing.assert_allclose(fld.query_sdf_gradient(pts), fd, atol=1e-5)


def test_nodes_exact_and_faces_continuous():
    fld = random_field(4)
    i, j, k = np.meshgrid(*[np.arange(n) for n in fld.resolution], indexing="ij")
    h = (fld.hi - fld.lo) / (np.array(fld.resolution) - 1)
    nodes = fld.lo + np.stack([i, j, k], -1).reshape(-1, 3) * h
    np.testing.assert_allclose(fld.query_sdf(nodes), fld.sdf.ravel(), atol=1e-12)
    rng = np.random.default_rng(5)
    for axis in range(3):
        p = rng.uniform(fld.lo, fld.hi, (200, 3))
        p[:, axis] = fld.lo[axis] + rng.integers(1, fld.resolution[axis] - 1, 200) * h[axis]
        off = np.zeros(3)
        off[axis] = 1e-12
        assert np.max(np.abs(fld.query_sdf(p - off) - fld.query_sdf(p + off))) < 1e-9


def test_plane_is_reproduced_exactly():
    fld = SdfGridField.from_function(lambda p: p[:, 2] - 0.37, (-1, -1, -1), (1, 1, 1), 0.2, truncation=5)
    pts = np.random.default_rng(0).uniform(-1, 1, (100, 3))
    np.testing.assert_allclose(fld.query_sdf(pts), pts[:, 2] - 0.37, atol=1e-12)


def test_scalar_query_shapes():
    fld = random_field()
    assert np.ndim(fld.query_sdf(np.zeros(3))) == 0
    assert fld.query_sdf_gradient(np.zeros(3)).shape == (3,)


# --- tracing ------------------------------------------------------------------------------

def test_trace_sphere_matches_analytic():
    fld = sphere_field()
    o, d, r = sphere_rays(500)
    tr = trace_rays(fld, o, d)
    hit = np.isfinite(r)
    assert np.array_equal(tr.hit, hit)
    # the trilinear surface bulges off the true sphere by O(h^2 / R), more at grazing incidence
    assert np.median(np.abs(tr.t[hit] - r[hit])) < 5e-3
    assert np.max(np.abs(tr.t[hit] - r[hit])) < 5e-2


def test_trace_finds_first_root_of_interpolated_field():
    # DERIVED: first sign change of the trilinear field on a 1e-4 march
    fld = sphere_field()
    o, d, r = sphere_rays(60, seed=8)
    tr = trace_rays(fld, o, d)
    ts = np.arange(1.5, 3.5, 1e-4)
    for i in np.flatnonzero(tr.hit):
        s = fld.query_sdf(o[i] + ts[:, None] * d[i])
        first = np.argmax(s < 0)
        assert s[first] < 0
        assert ts[first - 1] - 1e-9 <= tr.t[i] <= ts[first] + 1e-9


def test_trace_steep_field_brackets_crossing():
    # a field three times steeper than a distance makes plain sphere tracing overshoot
    fld = SdfGridField.from_function(lambda p: 3.0 * (0.25 - p[:, 0]), (-1, -1, -1), (1, 1, 1), 0.1, truncation=9)
    tr = trace_rays(fld, np.array([[-3.0, 0.1, 0.2]]), np.array([[1.0, 0.0, 0.0]]))
    assert tr.hit[0] and not tr.at_entry[0]
    assert tr.t[0] == pytest.approx(3.25, abs=1e-9)


def test_trace_starting_inside_converges_at_entry():
    fld = sphere_field()
    tr = trace_rays(fld, np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
    assert tr.hit[0] and tr.at_entry[0] and tr.t[0] == 0.0


def test_trace_miss_returns_nan():
    tr = trace_rays(sphere_field(), np.array([[-3.0, 2.0, 0.0]]), np.array([[1.0, 0, 0]]))
    assert not tr.hit[0] and np.isnan(tr.t[0])


# --- canonical queries --------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.floats(-np.pi, np.pi), st.tuples(*[st.floats(-20, 20)] * 3))
def test_canonical_query_invariant_under_motion(yaw, shift):
    fld = sphere_field()
    t = RigidTransform.from_yaw(yaw, shift)
    ray = Ray(np.array([-3.0, 0.2, 0.1]), np.array([1.0, 0.0, 0.0]), 10.0)
    base = canonical_query(fld, RigidTransform.identity(), ray)
    moved = Ray(t.apply(ray.origin), t.apply_vector(ray.direction), 10.0)
    got = canonical_query(fld, t.inverse(), moved)
    assert got.range == pytest.approx(base.range, abs=1e-6)


def test_canonical_query_miss_is_drop():
    hit = canonical_query(sphere_field(), RigidTransform.identity(), Ray(np.array([-3.0, 2, 0]), np.array([1.0, 0, 0]), 10))
    assert hit.range is None and hit.drop == 1.0


# --- implicit range gradient --------------------------------------------------------------

def test_range_gradient_rejects_grazing_near_miss():
    fld = SdfGridField.from_function(lambda p: p[:, 2] - 0.0005, (-1, -1, -1), (1, 1, 1), 0.1, truncation=5)
    # a level ray 0.5 mm above the plane converges by the eps test but never crosses it
    r, g = range_gradient(fld, np.array([-3.0, 0, 0.001]), np.array([1.0, 0, 0]))
    assert r is None and g is None


def test_range_gradient_matches_finite_differences():
    fld = sphere_field(voxel=2.0 / 15, radius=0.55)
    assert fld.resolution == (16, 16, 16)
    o, d, _ = sphere_rays(40, seed=5, radius=0.55, spread=0.2)
    checked = 0
    for oi, di in zip(o, d):
        r, g = range_gradient(fld, oi, di)
        if r is None:
            continue
        nodes = np.flatnonzero(g)
        fd = np.zeros(len(nodes))
        for j, node in enumerate(nodes):
            vals = []
            for h in (1e-6, -1e-6):
                f2 = fld.copy()
                f2.sdf.ravel()[node] += h
                vals.append(trace_rays(f2, oi[None], di[None]).t[0])
            fd[j] = (vals[0] - vals[1]) / 2e-6
        assert np.linalg.norm(g.ravel()[nodes] - fd) / np.linalg.norm(fd) < 1e-3
        checked += 1
    assert checked >= 20


# --- loss pieces --------------------------------------------------------------------------

def test_single_ray_drop_loss_by_hand():
    # one drop ray with p_d = 0.5: BCE = ln 2; the only error is 1 and the Jaccard loss of {ray} is 1
    bce, _ = bce_with_logits([0.0], [1])
    lov, _ = lovasz_hinge([0.0], [1])
    assert bce == pytest.approx(np.log(2))
    assert lov == pytest.approx(1.0)


@settings(max_examples=80)
@given(st.lists(st.tuples(st.floats(-4, 4), st.integers(0, 1)), min_size=1, max_size=9))
def test_lovasz_matches_threshold_integral(rows):
    z = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    loss, _ = lovasz_hinge(z, y)
    assert loss == pytest.approx(lovasz_by_thresholds(z, y), abs=1e-9)


def test_lovasz_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    z = rng.normal(size=12)
    y = rng.integers(0, 2, 12)
    _, g = lovasz_hinge(z, y)
    h = 1e-7
    fd = np.array([(lovasz_hinge(z + h * e, y)[0] - lovasz_hinge(z - h * e, y)[0]) / (2 * h) for e in np.eye(12)])
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_bce_matches_formula():
    z = np.array([-2.0, 0.5, 3.0])
    y = np.array([0, 1, 1])
    p = 1 / (1 + np.exp(-z))
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bce_with_logits(z, y)[0] == pytest.approx(expected)


def optimum_setup(n=2000):
    """Exact sphere SDF with logits that are confidently right for hits and for the drop rays used."""
    radius = 0.6
    fld = SdfGridField.from_function(sphere_sdf(radius=radius), [-1.0] * 3, [1.0] * 3, 0.05,
                                     logit_fn=lambda p: np.clip(200.0 * (sphere_sdf(radius=radius)(p) - 0.15),
                                                                -30, 30))
    o, d, r = sphere_rays(n, seed=11, radius=radius, spread=0.5)
    # drop rays keep well clear of the surface so their probe sits in confident-drop territory
    closest = np.linalg.norm(np.cross(o, d), axis=1)
    keep = np.isfinite(r) | (closest > radius + 0.3)
    o, d, r = o[keep], d[keep], r[keep]
    return fld, RayBatch(o, d, r, ~np.isfinite(r))


def test_loss_is_zero_at_analytic_optimum():
    fld, batch = optimum_setup()
    assert batch.drop.any() and batch.hit.any()
    res = loss_total(fld, batch, eikonal_samples=4096, rng=np.random.default_rng(0))
    assert res.total < 1e-2, res.terms


def test_adam_step_decreases_loss_on_fixed_batch():
    fld, batch = optimum_setup()
    rng = np.random.default_rng(1)
    start = fld.copy()
    start.sdf += rng.normal(0, 0.01, start.sdf.shape)
    start.drop_logits[:] = rng.normal(0, 1, start.sdf.shape)
    eik = rng.uniform(fld.lo, fld.hi, (4096, 3))
    before = loss_total(start, batch, eikonal_points=eik).total
    stepped = fit_field(batch, FitConfig(iterations=1, batch_size=len(batch), learning_rate=1e-3,
                                         drop_learning_rate=1e-2), init=start)
    after = loss_total(stepped, batch, eikonal_points=eik).total
    assert after < before


def _fd_check(f, batch, weights, grid, eik, n_nodes=8):
    res = loss_total(f, batch, weights, eikonal_points=eik)
    grad = getattr(res, "grad_sdf" if grid == "sdf" else "grad_logits")
    for node in np.argsort(-np.abs(grad.ravel()))[:n_nodes]:
        vals = []
        for h in (1e-6, -1e-6):
            g = f.copy()
            getattr(g, grid).ravel()[node] += h
            vals.append(loss_total(g, batch, weights, eikonal_points=eik).total)
        fd = (vals[0] - vals[1]) / 2e-6
        assert grad.ravel()[node] == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_geometry_gradient_matches_finite_differences():
    # squarely hitting rays only: a grazing near-miss has no differentiable range
    radius = 0.6
    fld = SdfGridField.from_function(sphere_sdf(radius=radius), [-1.0] * 3, [1.0] * 3, 0.05)
    o, d, r = sphere_rays(300, seed=12, radius=radius, spread=0.1)
    rng = np.random.default_rng(2)
    f = fld.copy()
    f.sdf += rng.normal(0, 0.005, f.sdf.shape)
    eik = rng.uniform(fld.lo, fld.hi, (2000, 3))
    geometric = LossWeights(w_zeta=1.0, w_s=1.0, w_eik=0.1, w_drop=0.0)
    _fd_check(f, RayBatch(o, d, r + 0.01, np.zeros(len(o), bool)), geometric, "sdf", eik)


def test_drop_logit_gradient_matches_finite_differences():
    fld, batch = optimum_setup(300)
    rng = np.random.default_rng(2)
    f = fld.copy()
    f.drop_logits[:] = rng.normal(0, 1, f.sdf.shape)
    _fd_check(f, batch, LossWeights(), "drop_logits", rng.uniform(fld.lo, fld.hi, (2000, 3)))


def test_unconverged_hit_rays_use_the_logit_cap():
    fld = sphere_field()
    miss = RayBatch(np.array([[-3.0, 2.0, 0.0]]), np.array([[1.0, 0, 0]]), np.array([3.0]), np.array([False]))
    res = loss_total(fld, miss, eikonal_samples=16, rng=np.random.default_rng(0), require_convergence=False)
    assert res.n_converged == 0
    assert res.terms["bce"] == pytest.approx(LOGIT_CAP, rel=1e-6)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1, 1)


# --- fitting ------------------------------------------------------------------------------

def test_initialization_from_plane_samples():
    rng = np.random.default_rng(0)
    o = np.tile([0.0, 0.0, 2.0], (3000, 1))
    tgt = np.c_[rng.uniform(-3, 3, (3000, 2)), np.zeros(3000)]
    d = normalize(tgt - o)
    r = np.linalg.norm(tgt - o, axis=1)
    fld = initialize_field(RayBatch(o, d, r, np.zeros(3000, bool)), 0.2)
    probe = np.c_[rng.uniform(-2, 2, (200, 2)), rng.uniform(-0.3, 0.3, 200)]
    np.testing.assert_allclose(fld.query_sdf(probe), probe[:, 2], atol=1e-6)


def test_fit_requires_hits():
    with pytest.raises(ValueError):
        fit_field(RayBatch(np.zeros((2, 3)), np.tile([1.0, 0, 0], (2, 1)), [np.nan] * 2, [True, True]))


def test_fit_is_deterministic():
    o, d, r = sphere_rays(1500, seed=3)
    batch = RayBatch(o, d, r, ~np.isfinite(r))
    cfg = FitConfig(iterations=5, batch_size=512, seed=9)
    a = fit_field(batch, cfg, voxel_size=0.2)
    b = fit_field(batch, cfg, voxel_size=0.2)
    assert field_to_bytes(a) == field_to_bytes(b)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(iterations=-1)
    with pytest.raises(ValueError):
        FitConfig(final_lr_ratio=0.0)


# --- serialization ------------------------------------------------------------------------

def test_field_roundtrip(tmp_path):
    fld = random_field(4)
    back = field_from_bytes(field_to_bytes(fld))
    # node values are stored as float32
    assert np.array_equal(back.sdf, fld.sdf.astype(np.float32))
    assert np.array_equal(back.drop_logits, fld.drop_logits.astype(np.float32))
    assert np.array_equal(back.lo, fld.lo) and back.truncation == fld.truncation
    save_field(fld, tmp_path / "f.xvsdf")
    assert field_to_bytes(load_field(tmp_path / "f.xvsdf")) == field_to_bytes(fld)


def test_field_rejects_bad_magic():
    data = bytearray(field_to_bytes(random_field()))
    data[0:1] = b"Z"
    with pytest.raises(ValueError):
        field_from_bytes(bytes(data))


def test_eikonal_term_is_one_for_gradient_norm_two():
    fld = SdfGridField.from_function(lambda p: 2 * p[:, 2], (-1, -1, -1), (1, 1, 1), 0.1, truncation=10)
    batch = RayBatch(np.array([[0, 0, 3.0]]), np.array([[0, 0, -1.0]]), np.array([3.0]), np.array([False]))
    res = loss_total(fld, batch, eikonal_points=np.random.default_rng(0).uniform(-0.9, 0.9, (100, 3)))
    assert res.terms["eikonal"] == pytest.approx(1.0, abs=1e-12)


def test_no_converged_rays():
    miss = RayBatch(np.array([[-3.0, 2.0, 0.0]]), np.array([[1.0, 0, 0]]), np.array([3.0]), np.array([False]))
    with pytest.raises(NoConvergedRays):
        loss_total(sphere_field(), miss, eikonal_samples=16, rng=np.random.default_rng(0))


def test_zero_iterations_returns_initialization():
    o, d, r = sphere_rays(500, seed=3)
    rays = RayBatch(o, d, r, np.isnan(r))
    init = initialize_field(rays, 0.1)
    out = fit_field(rays, FitConfig(iterations=0), init=init)
    assert out is not init
    assert np.array_equal(out.sdf, init.sdf) and np.array_equal(out.drop_logits, init.drop_logits)


def test_non_finite_update_raises_diverged():
    o, d, r = sphere_rays(200, seed=4)
    rays = RayBatch(o, d, r, np.isnan(r))
    with np.errstate(invalid="ignore"), pytest.raises(Diverged):
        fit_field(rays, FitConfig(iterations=2, learning_rate=np.inf), voxel_size=0.1)


def test_sphere_fit_range_error_after_2k_iterations():
    # DERIVED: analytic ray cast against the unit sphere from the eight corners of a cube
    rng = np.random.default_rng(0)
    corners = np.array([[x, y, z] for x in (-3, 3) for y in (-3, 3) for z in (-3, 3)], float)
    o = corners[rng.integers(0, 8, 10000)]
    d = normalize(rng.normal(size=(10000, 3)) * 0.5 - o)
    r = sphere_hits(o, d)
    rays = RayBatch(o, d, r, np.isnan(r))
    fld = fit_field(rays, FitConfig(iterations=2000), voxel_size=0.1, bounds=([-1.6] * 3, [1.6] * 3))
    tr = trace_rays(fld, o[rays.hit], d[rays.hit])
    err = np.abs(tr.t - r[rays.hit])
    assert np.median(err[tr.hit]) < 2 * 0.1
    assert tr.hit.mean() > 0.99
