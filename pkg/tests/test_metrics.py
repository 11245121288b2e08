import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import jensenshannon
from scipy.stats import ks_2samp

from geoavatar.core import HOME, HOURS, WORK, RoleSequence, Trajectory, bbox_from_extent, build_grid, haversine_km
from geoavatar.errors import ConfigError, DataError
from geoavatar.metrics import (HourlyCells, RankedPresence, UndefinedResultError, activity_mae, activity_profile,
                               compare_grid_population, compare_od, daily_visit_counts, grid_population,
                               hourly_user_distribution_js, js_divergence, jump_sizes, ks_statistic,
                               natural_fluctuation, od_counts, pattern_distribution_js, pearson_r2,
                               reconstruction_experiment)

LN2 = math.log(2)
T0 = 19723 * 86400  # a Monday, midnight UTC


def grid(n=3):
    return build_grid(bbox_from_extent(35.0, 139.0, n, n), 1000)


def cells_traj(uid, cells, g, start=T0):
    cells = np.asarray(cells)
    return Trajectory(uid, start + 3600 * np.arange(cells.size), g.centers[cells, 0], g.centers[cells, 1])


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------
def ks_oracle(a, b):
    pts = sorted(set(a) | set(b))
    return max(abs(sum(x <= t for x in a) / len(a) - sum(x <= t for x in b) / len(b)) for t in pts)


def js_oracle(p, q):
    m = [(x + y) / 2 for x, y in zip(p, q)]
    kl = lambda u, v: sum(x * math.log(x / y) for x, y in zip(u, v) if x > 0)  # noqa: E731
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def r2_oracle(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov * cov / (vx * vy)


def mae_oracle(seqs_a, seqs_b, L):
    def prof(seqs):
        P = [[0.0] * L for _ in range(HOURS)]
        n = 0
        for s in seqs:
            for d in range(len(s) // HOURS):
                n += 1
                for h in range(HOURS):
                    P[h][s[d * HOURS + h]] += 1
        return [[v / n for v in row] for row in P]

    A, B = prof(seqs_a), prof(seqs_b)
    return sum(abs(A[h][l] - B[h][l]) for h in range(HOURS) for l in range(L)) / (HOURS * L)


# ---------------------------------------------------------------------------
# K-S
# ---------------------------------------------------------------------------
def test_ks_examples():
    assert ks_statistic([1, 2, 3], [1, 2, 3]) == 0
    assert ks_statistic([0, 0], [1, 1]) == 1.0
    assert ks_statistic([1, 2, 3, 4], [3, 4, 5, 6]) == 0.5
    with pytest.raises(DataError):
        ks_statistic([], [1])


def test_ks_matches_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 8, rng.integers(1, 15)).tolist()
        b = rng.integers(0, 8, rng.integers(1, 15)).tolist()
        assert abs(ks_statistic(a, b) - ks_oracle(a, b)) < 1e-9
        assert abs(ks_statistic(a, b) - ks_2samp(a, b).statistic) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-30, 30), min_size=1, max_size=20),
       st.lists(st.integers(-30, 30), min_size=1, max_size=20))
def test_ks_invariant_under_monotone_transform(a, b):
    # integer draws keep exp strictly monotone in floating point
    assert ks_statistic(a, b) == ks_statistic(np.exp(a), np.exp(b))


# ---------------------------------------------------------------------------
# JS
# ---------------------------------------------------------------------------
def test_js_examples():
    assert js_divergence([0.3, 0.7], [0.3, 0.7]) == 0
    assert js_divergence([1, 0], [0, 1]) == pytest.approx(LN2, abs=1e-15)
    assert js_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.03382207556860521, abs=1e-12)
    with pytest.raises(DataError):
        js_divergence([-0.5, 1.5], [0.5, 0.5])
    with pytest.raises(DataError):
        js_divergence([0.5, 0.4], [0.5, 0.5])


def test_js_matches_oracles():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        p = rng.random(n) * (rng.random(n) > 0.3)
        q = rng.random(n) * (rng.random(n) > 0.3)
        p[0] += 0.1
        q[-1] += 0.1
        p, q = p / p.sum(), q / q.sum()
        assert abs(js_divergence(p, q) - js_oracle(p.tolist(), q.tolist())) < 1e-9
        assert abs(js_divergence(p, q) - jensenshannon(p, q) ** 2) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=10))
def test_js_symmetric_and_bounded(pairs):
    p = np.array([a for a, _ in pairs]) + 1e-3
    q = np.array([b for _, b in pairs]) + 1e-3
    p, q = p / p.sum(), q / q.sum()
    assert js_divergence(p, q) == js_divergence(q, p)
    assert 0 <= js_divergence(p, q) <= LN2


# ---------------------------------------------------------------------------
# r^2
# ---------------------------------------------------------------------------
def test_r2_examples():
    x = np.array([1.0, 2.0, 5.0])
    assert pearson_r2(x, x) == pytest.approx(1.0)
    assert pearson_r2(x, -2 * x) == pytest.approx(1.0)
    assert pearson_r2([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9642857142857139, abs=1e-12)
    with pytest.raises(UndefinedResultError):
        pearson_r2([1, 1, 1], [1, 2, 3])
    with pytest.raises(DataError):
        pearson_r2([1], [1])


def test_r2_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(2, 12))
        x = rng.normal(size=n)
        y = rng.normal(size=n)
        assert abs(pearson_r2(x, y) - r2_oracle(x.tolist(), y.tolist())) < 1e-9


# ---------------------------------------------------------------------------
# activity features
# ---------------------------------------------------------------------------
def test_activity_mae_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        L = int(rng.integers(3, 6))
        a = [rng.integers(0, L, HOURS * int(rng.integers(1, 3))) for _ in range(int(rng.integers(1, 4)))]
        b = [rng.integers(0, L, HOURS * int(rng.integers(1, 3))) for _ in range(int(rng.integers(1, 4)))]
        pa = activity_profile([RoleSequence("a", 0, v, L=L) for v in a])
        pb = activity_profile([RoleSequence("b", 0, v, L=L) for v in b])
        assert abs(activity_mae(pa, pb) - mae_oracle([v.tolist() for v in a], [v.tolist() for v in b], L)) < 1e-9
        np.testing.assert_allclose(pa.sum(axis=1), 1.0, atol=1e-9)


def test_activity_alphabet_mismatch():
    with pytest.raises(DataError):
        activity_profile([RoleSequence("a", 0, np.zeros(HOURS, int), L=3),
                          RoleSequence("b", 0, np.zeros(HOURS, int), L=4)])


def test_hourly_js_examples():
    home = [RoleSequence(f"h{i}", 0, np.zeros(HOURS, int), L=3) for i in range(3)]
    work = [RoleSequence(f"w{i}", 0, np.ones(HOURS, int), L=3) for i in range(3)]
    assert hourly_user_distribution_js(home, home, HOME) == 0
    assert hourly_user_distribution_js(home, work, HOME) == pytest.approx(LN2)


def test_hourly_js_two_user_oracle():
    # user a at WORK half of the days at hour 10, user b never
    a = np.zeros(2 * HOURS, int)
    a[10] = WORK
    gen = [RoleSequence("a", 0, a, L=3), RoleSequence("b", 0, np.zeros(2 * HOURS, int), L=3)]
    truth = [RoleSequence("c", 0, np.zeros(2 * HOURS, int), L=3)]
    # hour 10: gen histogram puts 1/2 in bin 0 (prob 0) and 1/2 in bin 10 (prob 0.5); truth all in bin 0
    p = np.zeros(20)
    p[0] = p[10] = 0.5
    q = np.zeros(20)
    q[0] = 1.0
    expected = js_oracle(p.tolist(), q.tolist()) / HOURS
    assert hourly_user_distribution_js(gen, truth, WORK) == pytest.approx(expected, abs=1e-12)


def test_pattern_js_examples():
    rng = np.random.default_rng(4)
    X = rng.uniform(0, 1, (10, 12))
    assert pattern_distribution_js(X, X) == 0
    lo = np.hstack([rng.uniform(0, 0.01, (6, 6)), rng.uniform(0.9, 1, (6, 6))])
    hi = np.hstack([rng.uniform(0.9, 1, (6, 6)), rng.uniform(0, 0.01, (6, 6))])
    assert pattern_distribution_js(lo, hi) == pytest.approx(LN2)
    with pytest.raises(DataError):
        pattern_distribution_js(X[:1], X)


# ---------------------------------------------------------------------------
# physical laws
# ---------------------------------------------------------------------------
def test_stationary_user():
    g = grid()
    t = cells_traj("s", [4] * 48, g)
    assert jump_sizes([t], g).size == 0
    np.testing.assert_array_equal(daily_visit_counts([t], g), [1, 1])


def test_commuter_jumps_and_visits():
    g = grid()
    day = [0] * 9 + [8] * 8 + [0] * 7
    t = cells_traj("c", day * 3, g)
    j = jump_sizes([t], g)
    assert np.unique(j).size == 1 and j.size == 6
    np.testing.assert_array_equal(daily_visit_counts([t], g), [2, 2, 2])


def test_jumps_match_haversine_oracle():
    pts = [(35.0, 139.0), (35.01, 139.02), (35.03, 139.0)]
    t = Trajectory("x", np.array([0, 60, 120]), np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
    np.testing.assert_allclose(jump_sizes([t]), [haversine_km(pts[0], pts[1]), haversine_km(pts[1], pts[2])],
                               rtol=1e-12)


# ---------------------------------------------------------------------------
# grid population and OD
# ---------------------------------------------------------------------------
def test_two_user_two_cell_toy():
    g = build_grid(bbox_from_extent(35.0, 139.0, 1, 2), 1000)
    a = cells_traj("a", [0, 1, 1], g)
    b = cells_traj("b", [0, 0, 1], g)
    c = cells_traj("c", [1, 1, 0], g)
    pop = grid_population([HourlyCells("a", 0, np.array([0, 1, 1])), HourlyCells("b", 0, np.array([0, 0, 1]))], 2)
    assert pop == {(0, 0): 2, (1, 1): 1, (0, 1): 1, (1, 2): 2}
    od = od_counts([HourlyCells("a", 0, np.array([0, 1, 1])), HourlyCells("b", 0, np.array([0, 0, 1]))], 2)
    assert od == {(0, 1, 1): 1, (0, 1, 2): 1}
    # hand-counted vectors over keys (cell, hour): gen {a, b} vs truth {c}
    # keys (0,0),(0,1),(1,0),(1,1),(1,2),(0,2)
    gen = [2, 1, 0, 1, 2, 0]
    truth = [0, 0, 1, 1, 0, 1]
    assert compare_grid_population([a, b], [c], g) == pytest.approx(r2_oracle(gen, truth), abs=1e-12)
    # OD keys (0,1,1),(0,1,2),(1,0,2)
    assert compare_od([a, b], [c], g) == pytest.approx(r2_oracle([1, 1, 0], [0, 0, 1]), abs=1e-12)


def test_corpus_against_itself_is_one():
    g = grid()
    rng = np.random.default_rng(5)
    corpus = [cells_traj(f"u{i}", rng.integers(0, 9, 48), g) for i in range(20)]
    assert compare_grid_population(corpus, corpus, g) == pytest.approx(1.0)
    assert compare_od(corpus, corpus, g) == pytest.approx(1.0)


def test_disjoint_windows_are_an_error():
    g = grid()
    with pytest.raises(DataError):
        compare_grid_population([cells_traj("a", [0, 1], g)], [cells_traj("b", [0, 1], g, start=T0 + 86400)], g)


def test_natural_fluctuation():
    g = grid()
    same = [cells_traj(f"u{i}", [0] * 6 + [4] * 12 + [8] * 6, g) for i in range(4)]
    assert natural_fluctuation(same, g) == pytest.approx((1.0, 1.0))
    rng = np.random.default_rng(6)
    corpus = [cells_traj(f"u{i}", rng.integers(0, 9, 48), g) for i in range(30)]
    assert natural_fluctuation(corpus, g, 3) == natural_fluctuation(corpus, g, 3)
    with pytest.raises(DataError):
        natural_fluctuation(same[:1], g)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------
def ranked_users(n=40, seed=7):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(2, 8))
        place_cells = rng.choice(25, k, replace=False)
        ranks = rng.choice(k, 48, p=np.arange(k, 0, -1) / np.arange(k, 0, -1).sum())
        out.append(RankedPresence(f"u{i}", 0, place_cells[ranks], ranks))
    return out


def test_full_top_n_reconstructs_exactly():
    rows = reconstruction_experiment(ranked_users(), 25, [8, 20])
    for r in rows:
        assert (r["static_r2"], r["static_mse"], r["dynamic_r2"], r["dynamic_mse"]) == (1.0, 0.0, 1.0, 0.0)


def test_reconstruction_rejects_bad_n():
    with pytest.raises(ConfigError):
        reconstruction_experiment(ranked_users(), 25, [0])
    with pytest.raises(ConfigError):
        reconstruction_experiment(ranked_users(), 25, [])


@pytest.mark.parametrize("seed", [7, 8, 9])
def test_reconstruction_curves_monotone(seed):
    rows = reconstruction_experiment(ranked_users(seed=seed), 25, range(1, 9))
    s = [r["static_r2"] for r in rows]
    d = [r["dynamic_r2"] for r in rows]
    assert np.all(np.diff(s) >= -1e-12) and np.all(np.diff(d) >= -1e-12)
