"""Fidelity metrics: physical laws, activity features, grid/OD correlation, reconstruction curves."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import HOURS, Grid, RoleSequence, Trajectory, haversine_km_array
from .demolabel import fit_nmf
from .errors import ConfigError, DataError
from .ingest import hourly_cells

LN2 = math.log(2.0)
HOUR_S = 3600


class UndefinedResultError(DataError):
    pass


# ---------------------------------------------------------------------------
# Distribution distances
# ---------------------------------------------------------------------------
def ks_statistic(sample_a, sample_b) -> float:
    """Two-sample Kolmogorov-Smirnov distance ``sup |F_a - F_b|``."""
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise DataError("K-S statistic needs two non-empty samples")
    x = np.concatenate([a, b])
    fa = np.searchsorted(a, x, side="right") / a.size
    fb = np.searchsorted(b, x, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _kl(p, q):
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats (``0 ln 0 = 0``)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DataError("distributions must have the same length")
    if np.any(p < 0) or np.any(q < 0):
        raise DataError("distributions must be non-negative")
    if abs(p.sum() - 1) > 1e-9 or abs(q.sum() - 1) > 1e-9:
        raise DataError("distributions must sum to 1")
    m = 0.5 * (p + q)
    js = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    return float(min(max(js, 0.0), LN2))


def pearson_r2(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DataError("pearson_r2 needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedResultError("r^2 undefined for a zero-variance vector")
    r2 = float(dx @ dy) ** 2 / (sxx * syy)
    return min(r2, 1.0)


# ---------------------------------------------------------------------------
# Hourly cell view of trajectories
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class HourlyCells:
    user_id: str
    start_hour: int  # absolute epoch hour of cells[0]
    cells: np.ndarray  # -1 where the user has no record


def to_hourly(traj, grid: Grid) -> HourlyCells:
    if isinstance(traj, HourlyCells):
        return traj
    if len(traj) == 0:
        return HourlyCells(traj.user_id, 0, np.empty(0, dtype=np.int64))
    h0 = int(traj.timestamps[0] // HOUR_S)
    n = int(traj.timestamps[-1] // HOUR_S) - h0 + 1
    return HourlyCells(traj.user_id, h0, hourly_cells(traj, grid, h0 * HOUR_S, n))


def _hourly_all(trajs, grid):
    return [to_hourly(t, grid) for t in trajs]


def hourly_trajectory(hc: HourlyCells, grid: Grid) -> Trajectory:
    """One record per observed hour at its cell centre."""
    ok = hc.cells >= 0
    c = hc.cells[ok]
    ts = (hc.start_hour + np.flatnonzero(ok)).astype(np.int64) * HOUR_S
    return Trajectory(hc.user_id, ts, grid.centers[c, 0], grid.centers[c, 1])


# ---------------------------------------------------------------------------
# Physical laws
# ---------------------------------------------------------------------------
def jump_sizes(trajectories, grid: Grid | None = None) -> np.ndarray:
    """Distances (km) between consecutive records, zero-length jumps removed.

    With a grid, records are first snapped to their cell centres, so dwelling
    inside a cell never produces a jump.
    """
    out = []
    for t in trajectories:
        if isinstance(t, HourlyCells):
            if grid is None:
                raise ValueError("hourly cells need a grid")
            t = hourly_trajectory(t, grid)
        if len(t) < 2:
            continue
        lat, lon = t.lat, t.lon
        if grid is not None:
            cells = grid.locate_array(lat, lon)
            keep = cells >= 0
            lat = grid.centers[cells[keep], 0]
            lon = grid.centers[cells[keep], 1]
        d = haversine_km_array(lat[:-1], lon[:-1], lat[1:], lon[1:])
        out.append(d[d > 0])
    return np.concatenate(out) if out else np.empty(0)


def daily_visit_counts(trajectories, grid: Grid, tz_offset_s: int = 0) -> np.ndarray:
    """Number of distinct cells per observed user-day."""
    out = []
    for t in trajectories:
        if isinstance(t, HourlyCells):
            t = hourly_trajectory(t, grid)
        if len(t) == 0:
            continue
        cells = grid.locate_array(t.lat, t.lon)
        days = (t.timestamps + tz_offset_s) // 86400
        ok = cells >= 0
        pairs = np.unique(np.stack([days[ok], cells[ok]], axis=1), axis=0)
        _, counts = np.unique(pairs[:, 0], return_counts=True)
        out.append(counts)
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# Activity features
# ---------------------------------------------------------------------------
def _alphabet(role_seqs) -> int:
    Ls = {s.L for s in role_seqs}
    if len(Ls) != 1:
        raise DataError(f"role sequences mix alphabets {sorted(Ls)}")
    return Ls.pop()


def activity_profile(role_seqs) -> np.ndarray:
    """``profile[h, l]``: fraction of user-days with role ``l`` at hour ``h``."""
    role_seqs = list(role_seqs)
    if not role_seqs:
        raise DataError("activity profile of an empty corpus")
    L = _alphabet(role_seqs)
    counts = np.zeros((HOURS, L))
    n_days = 0
    for s in role_seqs:
        days = s.by_day()
        n_days += days.shape[0]
        for h in range(HOURS):
            counts[h] += np.bincount(days[:, h], minlength=L)
    return counts / n_days


def activity_mae(gen_profile, truth_profile) -> float:
    a = np.asarray(gen_profile, dtype=float)
    b = np.asarray(truth_profile, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"profile shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def user_hourly_probability(role_seqs, role: int) -> np.ndarray:
    """``(users, 24)`` per-user probability of ``role`` at each hour."""
    return np.stack([(s.by_day() == role).mean(axis=0) for s in role_seqs])


def _prob_histogram(values, bins):
    idx = np.minimum((np.asarray(values) * bins).astype(np.int64), bins - 1)
    h = np.bincount(idx, minlength=bins).astype(float)
    return h / h.sum()


def hourly_js_by_hour(gen_seqs, truth_seqs, role: int, bins: int = 20) -> np.ndarray:
    gen_seqs, truth_seqs = list(gen_seqs), list(truth_seqs)
    if not gen_seqs or not truth_seqs:
        raise DataError("both corpora must be non-empty")
    g = user_hourly_probability(gen_seqs, role)
    t = user_hourly_probability(truth_seqs, role)
    return np.array([js_divergence(_prob_histogram(g[:, h], bins), _prob_histogram(t[:, h], bins))
                     for h in range(HOURS)])


def hourly_user_distribution_js(gen_seqs, truth_seqs, role: int, bins: int = 20) -> float:
    """Mean over hours of the JS divergence between per-user probability histograms."""
    return float(hourly_js_by_hour(gen_seqs, truth_seqs, role, bins).mean())


def feature_histogram_js(features_a, features_b, bins_per_dim: int = 10) -> float:
    """JS between joint histograms after min-max scaling over the union."""
    a = np.asarray(features_a, dtype=float)
    b = np.asarray(features_b, dtype=float)
    allf = np.vstack([a, b])
    lo = allf.min(axis=0)
    span = allf.max(axis=0) - lo
    span[span == 0] = 1.0
    d = allf.shape[1]

    def hist(x):
        idx = np.minimum(((x - lo) / span * bins_per_dim).astype(np.int64), bins_per_dim - 1)
        flat = np.ravel_multi_index(idx.T, (bins_per_dim,) * d)
        h = np.bincount(flat, minlength=bins_per_dim**d).astype(float)
        return h / h.sum()

    return js_divergence(hist(a), hist(b))


def pattern_distribution_js(gen_patterns, truth_patterns, d: int = 3, bins_per_dim: int = 10,
                            iters: int = 500, seed: int = 0) -> float:
    """JS between the rank-``d`` NMF feature histograms of two pattern sets."""
    from .core import vectorize

    gen = [vectorize(p) if not isinstance(p, np.ndarray) else p for p in gen_patterns]
    truth = [vectorize(p) if not isinstance(p, np.ndarray) else p for p in truth_patterns]
    if len(gen) + len(truth) < d:
        raise DataError(f"need at least {d} patterns in total")
    if len(gen) < 2 or len(truth) < 2:
        raise DataError("need at least 2 patterns per side")
    V = np.vstack(gen + truth)
    W, _ = fit_nmf(V, d, iters=iters, seed=seed)
    return feature_histogram_js(W[: len(gen)], W[len(gen):], bins_per_dim)


# ---------------------------------------------------------------------------
# Spatio-temporal aggregates
# ---------------------------------------------------------------------------
def _window(hc: HourlyCells, window):
    hours = hc.start_hour + np.arange(hc.cells.size)
    ok = hc.cells >= 0
    if window is not None:
        ok &= (hours >= window[0]) & (hours <= window[1])
    return hours, ok


def grid_population(hourly, n_cells: int, window=None, fold: int | None = HOURS, tz_offset_s: int = 0) -> dict:
    """``{(cell, hour): user-hours}`` from hourly cell views.

    ``hour`` is the local hour of day when ``fold=24`` (counts pooled over the
    days of the window) or the absolute epoch hour when ``fold=None``.
    """
    keys = []
    shift = tz_offset_s // HOUR_S
    for hc in hourly:
        hours, ok = _window(hc, window)
        h = hours[ok] if fold is None else (hours[ok] + shift) % fold
        keys.append(h * n_cells + hc.cells[ok])
    if not keys:
        return {}
    uniq, counts = np.unique(np.concatenate(keys), return_counts=True)
    return {(int(k % n_cells), int(k // n_cells)): int(c) for k, c in zip(uniq, counts)}


def od_counts(hourly, n_cells: int, window=None, fold: int | None = HOURS, tz_offset_s: int = 0) -> dict:
    """``{(origin, destination, hour): moves}`` over consecutive observed hours with a cell change.

    A move is keyed by the hour of its destination record.
    """
    keys = []
    shift = tz_offset_s // HOUR_S
    for hc in hourly:
        c = hc.cells
        if c.shape[0] < 2:
            continue
        hours, ok = _window(hc, window)
        mv = ok[:-1] & ok[1:] & (c[:-1] != c[1:])
        o, dst = c[:-1][mv], c[1:][mv]
        h = hours[1:][mv]
        h = h if fold is None else (h + shift) % fold
        keys.append((h * n_cells + o) * n_cells + dst)
    if not keys:
        return {}
    uniq, counts = np.unique(np.concatenate(keys), return_counts=True)
    return {(int((k // n_cells) % n_cells), int(k % n_cells), int(k // (n_cells * n_cells))): int(c)
            for k, c in zip(uniq, counts)}


def _hour_range(hourly):
    starts = [hc.start_hour for hc in hourly if hc.cells.size]
    ends = [hc.start_hour + hc.cells.size - 1 for hc in hourly if hc.cells.size]
    if not starts:
        return None
    return min(starts), max(ends)


def _overlap(ha, hb):
    ra, rb = _hour_range(ha), _hour_range(hb)
    if ra is None or rb is None:
        raise DataError("empty corpus")
    lo, hi = max(ra[0], rb[0]), min(ra[1], rb[1])
    if lo > hi:
        raise DataError("corpora do not overlap in time")
    return lo, hi


def _paired(a: dict, b: dict):
    keys = sorted(set(a) | set(b))
    x = np.array([a.get(k, 0) for k in keys], dtype=float)
    y = np.array([b.get(k, 0) for k in keys], dtype=float)
    return keys, x, y


def _paired_r2(a: dict, b: dict) -> float:
    _, x, y = _paired(a, b)
    # identical aggregates agree perfectly even when their counts are constant
    if np.array_equal(x, y) and x.size:
        return 1.0
    return pearson_r2(x, y)


def aggregate_pair(gen_trajs, truth_trajs, grid: Grid, what: str, fold: int | None = HOURS, tz_offset_s: int = 0):
    """Grid-population or OD dictionaries of two corpora over their common hour window."""
    hg, ht = _hourly_all(gen_trajs, grid), _hourly_all(truth_trajs, grid)
    window = _overlap(hg, ht)
    fn = grid_population if what == "grid" else od_counts
    return (fn(hg, grid.n_cells, window, fold, tz_offset_s), fn(ht, grid.n_cells, window, fold, tz_offset_s))


def compare_grid_population(gen_trajs, truth_trajs, grid: Grid, fold: int | None = HOURS,
                            tz_offset_s: int = 0) -> float:
    a, b = aggregate_pair(gen_trajs, truth_trajs, grid, "grid", fold, tz_offset_s)
    return _paired_r2(a, b)


def compare_od(gen_trajs, truth_trajs, grid: Grid, fold: int | None = HOURS, tz_offset_s: int = 0) -> float:
    a, b = aggregate_pair(gen_trajs, truth_trajs, grid, "od", fold, tz_offset_s)
    return _paired_r2(a, b)


def per_hour_r2(a: dict, b: dict, fold: int = HOURS) -> list:
    """r^2 of each hour-of-day slice (``None`` where undefined)."""
    keys, x, y = _paired(a, b)
    hod = np.array([k[-1] % fold for k in keys])
    out = []
    for h in range(fold):
        m = hod == h
        try:
            out.append(pearson_r2(x[m], y[m]) if m.sum() >= 2 else None)
        except UndefinedResultError:
            out.append(None)
    return out


def natural_fluctuation(truth_trajs, grid: Grid, split_seed: int = 0, fold: int | None = HOURS,
                        tz_offset_s: int = 0):
    """Grid and OD r^2 between two random halves of the ground truth."""
    truth = list(truth_trajs)
    if len(truth) < 2:
        raise DataError("natural fluctuation needs at least 2 users")
    perm = np.random.default_rng(split_seed).permutation(len(truth))
    half = len(truth) // 2
    a = [truth[i] for i in sorted(perm[:half])]
    b = [truth[i] for i in sorted(perm[half:])]
    return (compare_grid_population(a, b, grid, fold, tz_offset_s),
            compare_od(a, b, grid, fold, tz_offset_s))


# ---------------------------------------------------------------------------
# Long-tail reconstruction
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class RankedPresence:
    """Hourly cells of a user together with the popularity rank (0 = HOME) of the place occupied."""

    user_id: str
    start_hour: int
    cells: np.ndarray
    ranks: np.ndarray


def _r2_or_edge(x, y) -> float:
    if np.array_equal(x, y):
        return 1.0
    try:
        return pearson_r2(x, y)
    except UndefinedResultError:
        return 0.0


def _hourly_means(full: dict, rec: dict, hours):
    r2s, mses = [], []
    by_hour_f: dict[int, dict] = {}
    by_hour_r: dict[int, dict] = {}
    for k, v in full.items():
        by_hour_f.setdefault(k[-1], {})[k] = v
    for k, v in rec.items():
        by_hour_r.setdefault(k[-1], {})[k] = v
    for h in hours:
        f, r = by_hour_f.get(h, {}), by_hour_r.get(h, {})
        keys = sorted(set(f) | set(r))
        if len(keys) < 2:
            continue
        x = np.array([f.get(k, 0) for k in keys], dtype=float)
        y = np.array([r.get(k, 0) for k in keys], dtype=float)
        r2s.append(_r2_or_edge(x, y))
        mses.append(float(np.mean((x - y) ** 2)))
    return (float(np.mean(r2s)) if r2s else 1.0), (float(np.mean(mses)) if mses else 0.0)


def reconstruction_experiment(users, n_cells: int, N_list) -> list[dict]:
    """Hour-averaged r^2 / MSE of grid population and OD when only top-N places are kept."""
    N_list = list(N_list)
    if not N_list:
        raise ConfigError("N_list must not be empty")
    if any(int(N) < 1 for N in N_list):
        raise ConfigError("every N must be >= 1")
    users = list(users)
    full_h = [HourlyCells(u.user_id, u.start_hour, u.cells) for u in users]
    full_pop = grid_population(full_h, n_cells)
    full_od = od_counts(full_h, n_cells)
    hours = sorted({k[-1] for k in full_pop})
    rows = []
    for N in N_list:
        rec_h = [HourlyCells(u.user_id, u.start_hour, np.where((u.ranks >= 0) & (u.ranks < N), u.cells, -1))
                 for u in users]
        s_r2, s_mse = _hourly_means(full_pop, grid_population(rec_h, n_cells), hours)
        d_r2, d_mse = _hourly_means(full_od, od_counts(rec_h, n_cells), hours)
        rows.append({"N": int(N), "static_r2": s_r2, "static_mse": s_mse,
                     "dynamic_r2": d_r2, "dynamic_mse": d_mse})
    return rows


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------
@dataclass
class MetricReport:
    ks_jump: float
    ks_daily_visits: float
    activity_mae: float
    hourly_js: float
    pattern_js_3d: float
    grid_r2: float
    od_r2: float
    natural_grid_r2: float
    natural_od_r2: float
    hourly_js_by_role: dict = field(default_factory=dict)
    per_hour: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def finite(self) -> bool:
        return all(math.isfinite(getattr(self, f)) for f in (
            "ks_jump", "ks_daily_visits", "activity_mae", "hourly_js", "pattern_js_3d",
            "grid_r2", "od_r2", "natural_grid_r2", "natural_od_r2"))


def role_sequences_equal_alphabet(seqs, L):
    return [s if s.L == L else RoleSequence(s.user_id, s.start_day, s.values, L=L) for s in seqs]
