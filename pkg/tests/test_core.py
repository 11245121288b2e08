import math

import numpy as np
import pytest

from geoavatar.core import (HOME, HOURS, WORK, LifePattern, RoleAlphabet, RoleSequence, Trajectory,
                            alphabet_from_dim, bbox_from_extent, build_grid, devectorize, haversine_km,
                            normalize_pattern, occupancy, pattern_dim, pattern_from_dict, pattern_to_dict,
                            vectorize)
from geoavatar.errors import ConfigError, DataError, ShapeError


def random_pattern(L, rng):
    return normalize_pattern(rng.normal(size=(HOURS, L, L)), rng.normal(size=L))


def test_role_alphabet_names():
    a = RoleAlphabet(5)
    assert a.names == ["HOME", "WORK", "OTHER_1", "OTHER_2", "OTHER_3"]
    with pytest.raises(ConfigError):
        RoleAlphabet(2)
    with pytest.raises(ValueError):
        a.name(5)


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("h_km,w_km,rows,cols", [(1, 1, 1, 1), (2, 2, 2, 2), (2.5, 1, 3, 1)])
def test_build_grid_shapes(h_km, w_km, rows, cols):
    g = build_grid(bbox_from_extent(35.0, 139.0, h_km, w_km), 1000)
    assert (g.n_rows, g.n_cols) == (rows, cols)


def test_bbox_extent_matches_haversine_oracle():
    lat0, lat1, lon0, lon1 = bbox_from_extent(35.0, 139.0, 2.5, 1.0)
    assert haversine_km((lat0, 139.0), (lat1, 139.0)) == pytest.approx(2.5, abs=1e-9)
    assert haversine_km((35.0, lon0), (35.0, lon1)) == pytest.approx(1.0, rel=1e-3)


def test_build_grid_rejects_degenerate():
    with pytest.raises(ConfigError):
        build_grid((35.0, 35.0, 139.0, 139.1), 1000)
    with pytest.raises(ConfigError):
        build_grid((35.0, 35.1, 139.0, 139.1), 0)


def test_locate_corners_and_edges():
    g = build_grid(bbox_from_extent(35.0, 139.0, 3, 3), 1000)
    assert g.locate(g.lat_min, g.lon_min) == 0
    lat0, lat1, lon0, lon1 = g.cell_bounds(g.n_cells - 1)
    assert g.locate((lat0 + lat1) / 2, (lon0 + lon1) / 2) == g.n_cells - 1
    assert g.locate(g.lat_max, g.lon_max) == g.n_cells - 1
    # interior edge between cell 0 and cell 1 -> lower index
    edge_lon = g.cell_bounds(0)[3]
    assert g.locate(g.lat_min + 1e-6, edge_lon) == 0
    edge_lat = g.cell_bounds(0)[1]
    assert g.locate(edge_lat, g.lon_min + 1e-6) == 0
    assert g.locate(g.lat_max + 0.01, g.lon_min) is None
    assert g.locate_array(np.array([g.lat_max + 0.01]), np.array([g.lon_min]))[0] == -1


def test_cell_centers_locate_back():
    g = build_grid(bbox_from_extent(35.0, 139.0, 4.3, 5.7), 1000)
    cells = g.locate_array(g.centers[:, 0], g.centers[:, 1])
    np.testing.assert_array_equal(cells, np.arange(g.n_cells))


# ---------------------------------------------------------------------------
# haversine
# ---------------------------------------------------------------------------
def test_haversine_values():
    assert haversine_km((35.0, 139.0), (35.0, 139.0)) == 0.0
    # R * pi / 180 with R = 6371
    assert haversine_km((0, 0), (0, 1)) == pytest.approx(111.19492664455873, abs=1e-9)
    assert haversine_km((0, 0), (1, 0)) == pytest.approx(111.19492664455873, abs=1e-9)
    assert haversine_km((0, 0), (0, 1)) == pytest.approx(111.195, abs=5e-4)


# ---------------------------------------------------------------------------
# patterns
# ---------------------------------------------------------------------------
def test_pattern_dims():
    assert pattern_dim(12) == 3468
    assert pattern_dim(3) == 219
    assert alphabet_from_dim(3468) == 12
    with pytest.raises(ShapeError):
        alphabet_from_dim(3467)


def test_normalize_pattern_examples():
    L = 4
    p = normalize_pattern(np.zeros((HOURS, L, L)), np.zeros(L))
    np.testing.assert_allclose(p.T, 1 / L)
    raw = np.zeros((HOURS, L, L))
    raw[:, :, 2] = 1e6
    p = normalize_pattern(raw, np.zeros(L))
    np.testing.assert_allclose(p.T[:, :, 2], 1.0)
    with pytest.raises(DataError):
        normalize_pattern(np.full((HOURS, L, L), np.nan), np.zeros(L))
    with pytest.raises(ShapeError):
        normalize_pattern(np.zeros((HOURS, L, L + 1)), np.zeros(L))


def test_uniform_pi_doubly_stochastic_is_stationary():
    L = 3
    perm = np.eye(L)[[1, 2, 0]]
    T = np.stack([0.5 * perm + 0.5 * np.eye(L)] * HOURS)
    p = LifePattern(np.full(L, 1 / L), T)
    np.testing.assert_allclose(p.O, 1 / L)


def test_occupancy_recurrence_is_exact():
    p = random_pattern(5, np.random.default_rng(0))
    O = p.O
    assert np.array_equal(O[0], p.pi)
    for h in range(HOURS - 1):
        assert np.array_equal(O[h + 1], O[h] @ p.T[h])
    assert np.array_equal(O, occupancy(p.pi, p.T))


def test_life_pattern_validation():
    L = 3
    T = np.full((HOURS, L, L), 1 / L)
    with pytest.raises(DataError):
        LifePattern(np.array([0.5, 0.5, 0.5]), T)
    with pytest.raises(ShapeError):
        LifePattern(np.full(L, 1 / L), T[:, :2])
    bad = T.copy()
    bad[0, 0] = [1.5, -0.5, 0.0]
    with pytest.raises(DataError):
        LifePattern(np.full(L, 1 / L), bad)
    p = LifePattern(np.full(L, 1 / L), T)
    with pytest.raises(ValueError):
        p.T[0, 0, 0] = 1.0


def test_vectorize_layout_and_roundtrip():
    p = random_pattern(3, np.random.default_rng(1))
    v = vectorize(p)
    assert v.shape == (219,)
    assert np.array_equal(v[:3], p.pi)
    assert np.array_equal(v[3:6], p.T[0, 0])
    assert np.array_equal(v[6:9], p.T[0, 1])
    assert devectorize(v) == p
    with pytest.raises(ShapeError):
        devectorize(v[:-1], L=3)


def test_devectorize_renormalizes_rows():
    p = random_pattern(3, np.random.default_rng(2))
    v = vectorize(p) * 3.0
    q = devectorize(v)
    np.testing.assert_allclose(vectorize(q), vectorize(p), atol=1e-12)


def test_pattern_dict_roundtrip():
    p = random_pattern(4, np.random.default_rng(3))
    assert pattern_from_dict(pattern_to_dict(p)) == p


def test_support_threshold():
    L = 4
    T = np.zeros((HOURS, L, L))
    T[:, :, HOME] = 1.0
    T[7, HOME] = [0.5, 0.5, 0, 0]
    p = LifePattern(np.eye(L)[HOME], T)
    assert p.support() == [HOME, WORK]


# ---------------------------------------------------------------------------
# trajectories and role sequences
# ---------------------------------------------------------------------------
def test_trajectory_validation():
    Trajectory("u", np.array([0, 1]), np.array([35.0, 35.0]), np.array([139.0, 139.0]))
    with pytest.raises(DataError):
        Trajectory("u", np.array([1, 1]), np.array([35.0, 35.0]), np.array([139.0, 139.0]))
    with pytest.raises(DataError):
        Trajectory("u", np.array([0, 1]), np.array([95.0, 35.0]), np.array([139.0, 139.0]))
    with pytest.raises(ShapeError):
        Trajectory("u", np.array([0, 1]), np.array([35.0]), np.array([139.0, 139.0]))


def test_role_sequence_validation():
    s = RoleSequence("u", 0, np.zeros(48, dtype=int), L=3)
    assert s.days == 2
    assert s.by_day().shape == (2, 24)
    with pytest.raises(ShapeError):
        RoleSequence("u", 0, np.zeros(25, dtype=int), L=3)
    with pytest.raises(DataError):
        RoleSequence("u", 0, np.full(24, 3), L=3)


def test_haversine_symmetric_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = (rng.uniform(-80, 80), rng.uniform(-170, 170))
        b = (rng.uniform(-80, 80), rng.uniform(-170, 170))
        assert haversine_km(a, b) == pytest.approx(haversine_km(b, a), abs=1e-9)
        assert haversine_km(a, b) >= 0
        assert math.isfinite(haversine_km(a, b))
