import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dilate_bruteforce

from crossview.occupancy import (
    EmptyCloud,
    OccupancyGrid,
    build_occupancy,
    constrain_background_sample,
    dilate,
    load_occupancy,
    occupancy_from_bytes,
    occupancy_to_bytes,
    save_occupancy,
)


def random_grid(seed, shape=(6, 5, 4), p=0.1, voxel=0.4):
    rng = np.random.default_rng(seed)
    return OccupancyGrid.from_dense(rng.integers(-5, 5, 3), voxel, rng.random(shape) < p)


def test_single_point_one_voxel():
    g = build_occupancy([[0.1, 0.2, 0.3]], 0.4)
    assert g.count() == 1
    assert g.occupied_keys() == {(0, 0, 0)}


def test_two_points_same_voxel():
    assert build_occupancy([[0.1, 0.1, 0.1], [0.3, 0.35, 0.2]], 0.4).count() == 1


def test_random_cloud_matches_hashing():
    # DERIVED: per-point voxel hashing
    pts = np.random.default_rng(0).uniform(-5, 5, (2000, 3))
    keys = {(int(np.floor(x / 0.4)), int(np.floor(y / 0.4)), int(np.floor(z / 0.4))) for x, y, z in pts}
    assert build_occupancy(pts, 0.4).occupied_keys() == keys


def test_bounds_cover_points_with_padding():
    pts = np.random.default_rng(1).uniform(-3, 3, (100, 3))
    g = build_occupancy(pts, 0.4)
    assert np.all(g.lo <= pts.min(0) - 0.4 + 1e-9) and np.all(g.hi >= pts.max(0) + 0.4 - 1e-9)


def test_empty_cloud():
    with pytest.raises(EmptyCloud):
        build_occupancy(np.zeros((0, 3)))


def test_singleton_dilation_is_27():
    g = dilate(build_occupancy([[0.1, 0.1, 0.1]], 0.4), 1)
    assert g.count() == 27


def test_radius_zero_is_identity():
    g = random_grid(2)
    assert dilate(g, 0).occupied_keys() == g.occupied_keys()


def test_radius_two_equals_two_unit_steps():
    g = random_grid(3)
    assert dilate(g, 2).occupied_keys() == dilate(dilate(g, 1), 1).occupied_keys()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_dilation_matches_bruteforce(seed, r):
    g = random_grid(seed, p=0.05)
    assert dilate(g, r).occupied_keys() == dilate_bruteforce(g.occupied_keys(), r)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3), st.integers(0, 3))
def test_dilation_is_additive_monotone_extensive(seed, r1, r2):
    g = random_grid(seed)
    once = dilate(g, r1)
    assert g.occupied_keys() <= once.occupied_keys()
    assert dilate(once, r2).occupied_keys() == dilate(g, r1 + r2).occupied_keys()


def test_negative_radius_rejected():
    with pytest.raises(ValueError):
        dilate(random_grid(0), -1)


def test_is_observed_examples():
    g = build_occupancy([[0.1, 0.1, 0.1]], 0.4)
    assert g.is_observed(np.array([0.2, 0.2, 0.2]))
    assert not g.is_observed(np.array([50.0, 0, 0]))
    assert not g.is_observed(np.array([0.5, 0.1, 0.1]))
    assert dilate(g, 1).is_observed(np.array([0.5, 0.1, 0.1]))


def test_half_open_voxel_faces():
    g = build_occupancy([[0.1, 0.1, 0.1]], 0.4)
    assert g.is_observed(np.array([0.0, 0.0, 0.0]))
    assert not g.is_observed(np.array([0.4, 0.1, 0.1]))


def test_constrain_background_sample():
    g = build_occupancy([[0.1, 0.1, 0.1]], 0.4)
    assert constrain_background_sample(g, np.array([0.2, 0.2, 0.2]), 0.01, 0.1) == (0.01, 0.1)
    s, p = constrain_background_sample(g, np.array([9.0, 9, 9]), 0.01, 0.1)
    assert p == 1.0 and s == np.inf
    # on a face: the half-open convention decides, exactly as is_observed does
    face = np.array([0.4, 0.1, 0.1])
    assert (constrain_background_sample(g, face, 0.0, 0.2)[1] == 1.0) == (not g.is_observed(face))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_constrain_never_revives_a_forced_drop(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(seed % 1000, p=0.3)
    pts = rng.uniform(g.lo - 1, g.hi + 1, (200, 3))
    s, p = constrain_background_sample(g, pts, rng.normal(size=200), rng.random(200))
    forced = ~g.is_observed(pts)
    assert np.all(p[forced] == 1.0) and np.all(np.isinf(s[forced]))


def test_training_endpoints_are_observed():
    pts = np.random.default_rng(4).uniform(-10, 10, (500, 3))
    assert build_occupancy(pts, 0.4).is_observed(pts).all()


def test_exit_distance():
    g = build_occupancy([[0.1, 0.1, 0.1]], 0.4)
    t = g.exit_distance(np.array([[0.1, 0.1, 0.1]]), np.array([[1.0, 0, 0]]))
    assert t[0] == pytest.approx(0.3)


def test_roundtrip(tmp_path):
    g = dilate(random_grid(5), 1)
    back = occupancy_from_bytes(occupancy_to_bytes(g))
    assert back.occupied_keys() == g.occupied_keys() and back.voxel_size == g.voxel_size
    save_occupancy(g, tmp_path / "g.xvocc")
    assert load_occupancy(tmp_path / "g.xvocc").occupied_keys() == g.occupied_keys()


def test_bad_magic():
    data = bytearray(occupancy_to_bytes(random_grid(0)))
    data[0] ^= 0xFF
    with pytest.raises(ValueError):
        occupancy_from_bytes(bytes(data))
