"""Seeded synthetic corpora: archetype populations on a small grid, plus a heavy-tailed variant."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_L, HOME, HOURS, WORK, Grid, LifePattern, RoleSequence, Trajectory, bbox_from_extent, build_grid
from .keyloc import M_PER_DEG
from .seqgen import gwg_sample_batch

FIXTURE_EPOCH_DAY = 19723  # Monday 2024-01-01
DEFAULT_CENTER = (35.6, 139.6)

# (name, segment, [(first hour, last hour, {role: weight}), ...])
ARCHETYPES = [
    ("commuter", 0, [
        (0, 7, {0: 1.0}),
        (8, 8, {0: 0.3, 1: 0.7}),
        (9, 11, {1: 1.0}),
        (12, 12, {1: 0.8, 2: 0.2}),
        (13, 17, {1: 1.0}),
        (18, 18, {1: 0.4, 0: 0.4, 3: 0.2}),
        (19, 20, {0: 0.7, 3: 0.2, 4: 0.1}),
        (21, 23, {0: 1.0}),
    ]),
    ("late_worker", 0, [
        (0, 9, {0: 1.0}),
        (10, 10, {0: 0.4, 1: 0.6}),
        (11, 20, {1: 0.9, 2: 0.1}),
        (21, 21, {1: 0.3, 3: 0.3, 0: 0.4}),
        (22, 23, {0: 0.8, 3: 0.2}),
    ]),
    ("student", 1, [
        (0, 6, {0: 1.0}),
        (7, 7, {0: 0.5, 1: 0.5}),
        (8, 14, {1: 0.95, 2: 0.05}),
        (15, 17, {2: 0.3, 3: 0.3, 0: 0.3, 1: 0.1}),
        (18, 23, {0: 0.9, 4: 0.1}),
    ]),
    ("homemaker", 2, [
        (0, 8, {0: 1.0}),
        (9, 11, {0: 0.5, 2: 0.25, 3: 0.15, 4: 0.1}),
        (12, 13, {0: 0.8, 2: 0.2}),
        (14, 17, {0: 0.4, 2: 0.2, 5: 0.2, 6: 0.2}),
        (18, 23, {0: 1.0}),
    ]),
    ("retiree", 2, [
        (0, 6, {0: 1.0}),
        (7, 10, {0: 0.5, 2: 0.3, 3: 0.2}),
        (11, 15, {0: 0.7, 4: 0.15, 5: 0.15}),
        (16, 23, {0: 0.95, 2: 0.05}),
    ]),
    ("explorer", 3, [
        (0, 7, {0: 1.0}),
        (8, 20, {0: 0.2, 1: 0.1, 2: 0.16, 3: 0.12, 4: 0.1, 5: 0.08, 6: 0.07, 7: 0.06,
                 8: 0.04, 9: 0.03, 10: 0.02, 11: 0.02}),
        (21, 23, {0: 0.8, 2: 0.2}),
    ]),
]
ARCHETYPE_MIX = np.array([0.25, 0.1, 0.2, 0.15, 0.15, 0.15])

# blobs in (row km, col km, sigma km, weight) on the default 20 x 20 km grid
RESIDENTIAL = [(4, 4, 2), (15, 4, 2), (4, 15, 2), (16, 16, 2)]
SEGMENT_HOME_WEIGHTS = np.array([
    [0.15, 0.15, 0.3, 0.4],  # worker
    [0.55, 0.15, 0.15, 0.15],  # student
    [0.15, 0.55, 0.15, 0.15],  # home-based
    [0.25, 0.25, 0.25, 0.25],  # other
])
WORK_BLOBS = [(10, 10, 1.2, 1.0), (14, 6, 1.0, 0.4)]
SCHOOL_BLOBS = [(5, 5, 2.0, 1.0), (12, 13, 2.0, 0.6)]
OTHER_BLOBS = [(10, 10, 1.5, 1.0), (5, 12, 1.2, 0.6), (13, 15, 1.2, 0.6)]
# background density added to every cell before normalisation
FLOORS = {"home": 0.0005, "work": 0.001, "school": 0.002, "other": 0.005}


def schedule_target(blocks, L: int = DEFAULT_L) -> np.ndarray:
    """Expand ``(first, last, weights)`` blocks into a ``(24, L)`` occupancy target."""
    target = np.zeros((HOURS, L))
    for a, b, w in blocks:
        for h in range(a, b + 1):
            for r, p in w.items():
                target[h, r] = p
    return target / target.sum(axis=1, keepdims=True)


def schedule_pattern(target: np.ndarray, stay) -> LifePattern:
    """Chain that keeps the current role with probability ``stay`` when it stays scheduled."""
    L = target.shape[1]
    stay = np.broadcast_to(np.asarray(stay, dtype=float), (HOURS,))
    T = np.empty((HOURS, L, L))
    for h in range(HOURS):
        nxt = target[(h + 1) % HOURS]
        keep = np.diag((nxt > 0).astype(float)) * stay[h]
        T[h] = keep + (1 - stay[h]) * nxt[None]
        T[h] += np.where(keep.sum(axis=1, keepdims=True) == 0, stay[h] * nxt[None], 0.0)
    T /= T.sum(axis=2, keepdims=True)
    return LifePattern(pi=target[0].copy(), T=T)


def archetype_patterns(L: int = DEFAULT_L, stay: float = 0.7):
    return [(name, seg, schedule_pattern(schedule_target(blocks, L), stay)) for name, seg, blocks in ARCHETYPES]


def user_pattern(blocks, rng: np.random.Generator, L: int = DEFAULT_L) -> LifePattern:
    """Archetype schedule with a +-1 h shift, jittered weights and a personal stickiness."""
    target = schedule_target(blocks, L)
    shift = rng.choice([-1, 0, 1], p=[0.2, 0.6, 0.2])
    target = np.roll(target, shift, axis=0)
    # keep nights at home whatever the shift
    target[0:4] = 0.0
    target[0:4, HOME] = 1.0
    noisy = target * rng.lognormal(0.0, 0.3, target.shape)
    noisy /= noisy.sum(axis=1, keepdims=True)
    return schedule_pattern(noisy, rng.uniform(0.5, 0.9))


# ---------------------------------------------------------------------------
# Geography
# ---------------------------------------------------------------------------
def default_grid(n: int = 20, cell_km: float = 1.0, center=DEFAULT_CENTER) -> Grid:
    return build_grid(bbox_from_extent(center[0], center[1], n * cell_km, n * cell_km), cell_km * 1000)


def _cell_km(grid: Grid) -> np.ndarray:
    c = np.arange(grid.n_cells)
    size = grid.cell_size_m / 1000
    return np.stack([(c // grid.n_cols + 0.5) * size, (c % grid.n_cols + 0.5) * size], axis=1)


def _density(grid: Grid, blobs, floor: float) -> np.ndarray:
    xy = _cell_km(grid)
    d = np.full(grid.n_cells, floor)
    for r, c, s, w in blobs:
        d += w * np.exp(-((xy[:, 0] - r) ** 2 + (xy[:, 1] - c) ** 2) / (2 * s * s))
    return d / d.sum()


def _pick(w, rng, exclude=()):
    w = np.asarray(w, dtype=float).copy()
    if len(exclude) < w.size:
        w[list(exclude)] = 0.0
    return int(rng.choice(w.size, p=w / w.sum()))


def _place_point(grid: Grid, cell: int, rng) -> tuple[float, float]:
    lat0, lat1, lon0, lon1 = grid.cell_bounds(cell)
    u = rng.uniform(0.25, 0.75, 2)
    return lat0 + u[0] * (lat1 - lat0), lon0 + u[1] * (lon1 - lon0)


def zone_of_cell(grid: Grid, cell) -> np.ndarray:
    """Quadrant zone id (0..3) of each cell."""
    cell = np.asarray(cell)
    return (cell // grid.n_cols >= grid.n_rows // 2) * 2 + (cell % grid.n_cols >= grid.n_cols // 2)


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------
@dataclass
class FixtureCorpus:
    grid: Grid
    trajectories: list
    role_sequences: list
    segments: np.ndarray
    archetypes: np.ndarray
    key_cells: list  # per user {role: cell}
    census: dict = field(default_factory=dict)
    start_day: int = FIXTURE_EPOCH_DAY


def gps_track(user_id: str, places: dict, roles: np.ndarray, start_day: int, rng: np.random.Generator,
              interval_s: int = 900, noise_m: float = 15.0) -> Trajectory:
    """Samples every ``interval_s`` at the place of the current hourly role, with Gaussian noise."""
    per_hour = 3600 // interval_s
    n = roles.shape[0] * per_hour
    ts = start_day * 86400 + np.arange(n, dtype=np.int64) * interval_s
    role_at = np.repeat(roles, per_hour)
    pts = np.array([places[int(r)] for r in role_at])
    lat = pts[:, 0] + rng.normal(0.0, noise_m, n) / M_PER_DEG
    lon = pts[:, 1] + rng.normal(0.0, noise_m, n) / (M_PER_DEG * np.cos(np.radians(pts[:, 0])))
    return Trajectory(user_id, ts, lat, lon)


def census_from(grid: Grid, home_cells, segments, n_segments: int) -> dict:
    zones = zone_of_cell(grid, np.asarray(home_cells))
    out = {}
    for z in sorted(set(zones.tolist())):
        counts = np.bincount(np.asarray(segments)[zones == z], minlength=n_segments).astype(float)
        out[str(z)] = counts / counts.sum()
    return out


def make_fixture(n_users: int = 2000, days: int = 7, seed: int = 0, grid: Grid | None = None,
                 L: int = DEFAULT_L, interval_s: int = 900, noise_m: float = 15.0,
                 start_day: int = FIXTURE_EPOCH_DAY) -> FixtureCorpus:
    grid = grid or default_grid()
    rng = np.random.default_rng(seed)
    home_dens = [_density(grid, [b + (w,) for b, w in zip(RESIDENTIAL, ws)], FLOORS["home"])
                 for ws in SEGMENT_HOME_WEIGHTS]
    work_dens = _density(grid, WORK_BLOBS, FLOORS["work"])
    school_dens = _density(grid, SCHOOL_BLOBS, FLOORS["school"])
    other_attr = _density(grid, OTHER_BLOBS, FLOORS["other"])
    D = grid.distance_matrix_km

    arch = rng.choice(len(ARCHETYPES), size=n_users, p=ARCHETYPE_MIX)
    patterns = [user_pattern(ARCHETYPES[a][2], rng, L) for a in arch]
    pis = np.stack([p.pi for p in patterns])
    Ts = np.stack([p.T for p in patterns])
    roles = gwg_sample_batch(pis, Ts, None, 1.0, days, rng)

    trajs, seqs, keys, homes = [], [], [], []
    segments = np.array([ARCHETYPES[a][1] for a in arch])
    width = len(str(max(n_users - 1, 0)))
    for i in range(n_users):
        uid = f"u{i:0{width}d}"
        seg = segments[i]
        home = _pick(home_dens[seg], rng)
        cells = {HOME: home}
        if seg == 1:
            cells[WORK] = _pick(school_dens * np.exp(-D[home] / 2.0), rng, [home])
        else:
            cells[WORK] = _pick(work_dens * np.exp(-D[home] / 8.0), rng, [home])
        for r in range(2, L):
            anchor = np.minimum(D[home], D[cells[WORK]])
            cells[r] = _pick(other_attr * np.exp(-anchor / 3.0), rng, list(cells.values()))
        points = {r: _place_point(grid, c, rng) for r, c in cells.items()}
        seq = RoleSequence(uid, start_day, roles[i], L=L)
        trajs.append(gps_track(uid, points, roles[i], start_day, rng, interval_s, noise_m))
        seqs.append(seq)
        keys.append(cells)
        homes.append(home)
    census = census_from(grid, homes, segments, len(SEGMENT_HOME_WEIGHTS))
    return FixtureCorpus(grid, trajs, seqs, segments, arch, keys, census, start_day)


def make_heavy_tail_fixture(n_users: int = 300, days: int = 14, seed: int = 0, grid: Grid | None = None,
                            places_range=(10, 30), zipf_a: float = 1.1, interval_s: int = 900,
                            noise_m: float = 15.0, start_day: int = FIXTURE_EPOCH_DAY) -> FixtureCorpus:
    """Users with 10-30 other places visited with Zipf-like frequencies, for long-tail studies."""
    grid = grid or default_grid()
    rng = np.random.default_rng(seed)
    attr = _density(grid, OTHER_BLOBS, 0.3)
    home_dens = _density(grid, [b + (1.0,) for b in RESIDENTIAL], 0.05)
    D = grid.distance_matrix_km
    trajs, seqs, keys = [], [], []
    width = len(str(max(n_users - 1, 0)))
    for i in range(n_users):
        uid = f"h{i:0{width}d}"
        k = int(rng.integers(places_range[0], places_range[1] + 1))
        L = k + 2
        home = _pick(home_dens, rng)
        works = bool(rng.random() < 0.6)
        cells = {HOME: home, WORK: _pick(attr * np.exp(-D[home] / 6.0), rng, [home])}
        for r in range(2, L):
            cells[r] = _pick(attr * np.exp(-D[home] / 4.0), rng, list(cells.values()))
        w = np.arange(1, k + 1, dtype=float) ** (-zipf_a)
        w /= w.sum()
        roles = np.zeros(days * HOURS, dtype=np.int64)
        for d in range(days):
            base = d * HOURS
            h = 8
            if works and (d % 7) < 5:
                roles[base + 9: base + 17] = WORK
                h = 17
            while h < 22:
                if rng.random() < 0.6:
                    dur = int(rng.integers(1, 4))
                    roles[base + h: base + min(h + dur, 22)] = 2 + rng.choice(k, p=w)
                    h += dur
                h += int(rng.integers(1, 3))
        points = {r: _place_point(grid, c, rng) for r, c in cells.items()}
        trajs.append(gps_track(uid, points, roles, start_day, rng, interval_s, noise_m))
        seqs.append(RoleSequence(uid, start_day, roles, L=L))
        keys.append(cells)
    return FixtureCorpus(grid, trajs, seqs, np.zeros(n_users, dtype=np.int64), np.zeros(n_users, dtype=np.int64),
                         keys, {}, start_day)
