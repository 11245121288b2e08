import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoavatar.core import HOME, HOURS, WORK, LifePattern, RoleSequence, bbox_from_extent, build_grid, haversine_km
from geoavatar.errors import AssignmentError
from geoavatar.ingest import SignificantPlace
from geoavatar.keyloc import (KeyLocationTable, SpatialPriors, UserAnchors, anchors_from_places,
                              fit_spatial_priors, geocode_cells, geocode_sequence, other_weights, sample_key_table)


def grid(n=5):
    return build_grid(bbox_from_extent(35.0, 139.0, n, n), 1000)


def home_only_pattern(L=3):
    T = np.zeros((HOURS, L, L))
    T[:, :, HOME] = 1.0
    return LifePattern(np.eye(L)[HOME], T)


def full_support_pattern(L=4):
    return LifePattern(np.full(L, 1 / L), np.full((HOURS, L, L), 1 / L))


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------
def test_all_homes_in_one_cell_is_point_mass():
    g = grid()
    pri = fit_spatial_priors([UserAnchors(0, 7) for _ in range(10)], g, 1, smoothing=0.0)
    d = pri.home_dist(0)
    assert d[7] == 1.0 and d.sum() == 1.0


def test_commute_counts_three_to_one():
    g = grid()
    users = [UserAnchors(0, 3, 10)] * 3 + [UserAnchors(0, 3, 11)]
    pri = fit_spatial_priors(users, g, 1, smoothing=0.0)
    row = pri.commute_od(0, 3)
    assert row[10] == pytest.approx(0.75) and row[11] == pytest.approx(0.25)
    # smoothed rows stay normalised
    pri = fit_spatial_priors(users, g, 1, smoothing=0.5)
    assert pri.commute_od(0, 3).sum() == pytest.approx(1.0)
    assert pri.commute_od(0, 12).sum() == pytest.approx(1.0)


def test_smoothing_only_is_uniform():
    g = grid()
    pri = SpatialPriors(np.zeros((1, g.n_cells)), np.zeros((1, g.n_cells, g.n_cells)), np.zeros(g.n_cells), 0.5)
    np.testing.assert_allclose(pri.home_dist(0), 1 / g.n_cells)
    np.testing.assert_allclose(pri.commute_od(0, 0), 1 / g.n_cells)


def test_empty_segment_falls_back_to_pooled():
    g = grid()
    pri = fit_spatial_priors([UserAnchors(0, 7), UserAnchors(0, 8)], g, 2, smoothing=0.0)
    np.testing.assert_allclose(pri.home_dist(1), pri.home_dist(0))


def test_priors_roundtrip():
    g = grid()
    users = [UserAnchors(0, 3, 10, {5: 3600.0}), UserAnchors(1, 4, None, {6: 7200.0})]
    pri = fit_spatial_priors(users, g, 2)
    back = SpatialPriors.from_dict(pri.to_dict())
    for s in (0, 1):
        np.testing.assert_array_equal(back.home_dist(s), pri.home_dist(s))
        np.testing.assert_array_equal(back.commute_od(s, 3), pri.commute_od(s, 3))
    np.testing.assert_array_equal(back.attractiveness, pri.attractiveness)
    assert pri.attractiveness[6] == pytest.approx(2.0 + 0.5)


def test_anchors_from_places():
    g = grid()
    c = g.cell_center
    places = [SignificantPlace("u", HOME, *c(2), 5, 100), SignificantPlace("u", WORK, *c(9), 5, 100),
              SignificantPlace("u", 2, *c(4), 2, 1800), SignificantPlace("u", 3, *c(4), 1, 1800)]
    a = anchors_from_places(places, 1, g)
    assert (a.home, a.work, a.other_dwell) == (2, 9, {4: 3600.0})
    assert anchors_from_places([SignificantPlace("u", HOME, 0.0, 0.0, 1, 1)], 0, g) is None


# ---------------------------------------------------------------------------
# key tables
# ---------------------------------------------------------------------------
def test_single_cell_grid():
    g = build_grid(bbox_from_extent(35.0, 139.0, 1, 1), 1000)
    pri = fit_spatial_priors([UserAnchors(0, 0, 0, {0: 60.0})], g, 1)
    t = sample_key_table(0, pri, full_support_pattern(), g, np.random.default_rng(0))
    assert t.cells == {0: 0, 1: 0, 2: 0, 3: 0}


def test_two_candidate_softmax():
    # oracle: exp(-1) / (exp(-1) + exp(-2)) = 0.7310585786300049
    g = build_grid(bbox_from_extent(0.0, 0.0, 1, 3), 1000)
    attr = np.ones(3)
    w = other_weights(attr, [0], g, decay_km=1.0)
    d1, d2 = g.distance_matrix_km[0, 1], g.distance_matrix_km[0, 2]
    p = w[1:] / w[1:].sum()
    expected = math.exp(-d1) / (math.exp(-d1) + math.exp(-d2))
    assert p[0] == pytest.approx(expected, rel=1e-12)
    assert d1 == pytest.approx(1.0, rel=1e-3) and d2 == pytest.approx(2.0, rel=1e-3)
    assert p[0] == pytest.approx(0.7310585786300049, abs=2e-3)


def test_infinite_decay_uses_attractiveness_only():
    g = grid()
    attr = np.arange(g.n_cells, dtype=float) + 1
    np.testing.assert_array_equal(other_weights(attr, [0], g, math.inf), attr)


def test_table_covers_support_and_distinct_anchors():
    g = grid()
    users = [UserAnchors(0, h, (h + 7) % 25, {(h + 3) % 25: 3600.0}) for h in range(25)]
    pri = fit_spatial_priors(users, g, 1)
    rng = np.random.default_rng(1)
    for _ in range(50):
        t = sample_key_table(0, pri, full_support_pattern(5), g, rng)
        assert set(t.cells) == {0, 1, 2, 3, 4}
        assert len(set(t.cells.values())) == 5


def test_extra_roles_are_assigned():
    g = grid()
    pri = fit_spatial_priors([UserAnchors(0, 3)], g, 1)
    t = sample_key_table(0, pri, home_only_pattern(4), g, np.random.default_rng(0), extra_roles=[3])
    assert set(t.cells) == {HOME, 3}


def test_never_picks_zero_mass_cells():
    g = grid()
    pri = fit_spatial_priors([UserAnchors(0, 3, 4, {5: 60.0})], g, 1, smoothing=0.0)
    rng = np.random.default_rng(2)
    for _ in range(200):
        t = sample_key_table(0, pri, full_support_pattern(3), g, rng)
        assert t[HOME] == 3 and t[WORK] == 4 and t[2] == 5


def test_home_marginal_matches_prior():
    g = build_grid(bbox_from_extent(35.0, 139.0, 20, 20), 1000)
    rng = np.random.default_rng(3)
    homes = rng.choice(g.n_cells, 300, p=np.linspace(1, 5, g.n_cells) / np.linspace(1, 5, g.n_cells).sum())
    pri = fit_spatial_priors([UserAnchors(0, int(h)) for h in homes], g, 1)
    pat = home_only_pattern()
    n = 100_000
    draws = np.array([sample_key_table(0, pri, pat, g, rng)[HOME] for _ in range(n)])
    freq = np.bincount(draws, minlength=g.n_cells) / n
    assert np.abs(freq - pri.home_dist(0)).max() < 0.01


# ---------------------------------------------------------------------------
# geocoding
# ---------------------------------------------------------------------------
def test_all_home_sequence():
    g = grid()
    seq = RoleSequence("p", 19723, np.zeros(48, dtype=int), L=3)
    t = geocode_sequence(seq, KeyLocationTable({HOME: 6}), g, jitter_m=0.0)
    assert len(t) == 48
    assert np.all(t.lat == g.centers[6, 0]) and np.all(t.lon == g.centers[6, 1])
    assert np.all(np.diff(t.timestamps) == 3600) and t.timestamps[0] % 3600 == 0


def test_missing_role_is_an_error():
    seq = RoleSequence("p", 0, np.array([0] * 23 + [2]), L=3)
    with pytest.raises(AssignmentError, match=r"\[2\]"):
        geocode_sequence(seq, KeyLocationTable({HOME: 0}), grid())


def test_commuter_jumps_contain_home_work_distance():
    g = grid()
    day = np.zeros(HOURS, dtype=int)
    day[9:18] = WORK
    t = geocode_sequence(RoleSequence("p", 0, day, L=3), KeyLocationTable({HOME: 0, WORK: 24}), g, jitter_m=0.0)
    jumps = [haversine_km((t.lat[k], t.lon[k]), (t.lat[k + 1], t.lon[k + 1])) for k in range(len(t) - 1)]
    expected = haversine_km(tuple(g.centers[0]), tuple(g.centers[24]))
    assert sum(abs(j - expected) < 1e-9 for j in jumps) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 2000))
def test_jittered_points_stay_in_their_cells(seed, jitter):
    g = grid()
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, g.n_cells, 30)
    t = geocode_cells("p", cells, 0, g, jitter, rng)
    assert np.array_equal(g.locate_array(t.lat, t.lon), cells)
