"""Reference generators: full-explicit per-user modelling (FEM) and a TimeGeo-style EPR walker."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import HOME, HOURS, WORK, Grid, RoleSequence, Trajectory
from .errors import DataError, InsufficientDataError
from .ingest import weekday
from .keyloc import geocode_cells
from .seqgen import gwg_sample_batch

log = logging.getLogger(__name__)

TOP_OTHER = 2
BUCKET = 3
FEM_STATES = 4
WEEK_HOURS = 7 * HOURS


# ---------------------------------------------------------------------------
# FEM
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FemModel:
    user_id: str
    pi: np.ndarray  # (4,)
    T: np.ndarray  # (24, 4, 4)
    cells: dict  # state -> cell for HOME / WORK / TOP_OTHER
    bucket: tuple = ()  # ((cell, dwell_s), ...)

    @property
    def states(self) -> list[int]:
        s = sorted(self.cells)
        if self.bucket:
            s.append(BUCKET)
        return s


def collapse_roles(values: np.ndarray) -> np.ndarray:
    """Map a full role alphabet onto HOME, WORK, TOP_OTHER and one OTHER bucket."""
    return np.minimum(np.asarray(values), BUCKET)


def fem_fit(role_seq: RoleSequence, role_cells: dict, dwell_s: dict | None = None,
            smoothing: float = 0.01) -> FemModel:
    """Per-user hourly first-order tables over the truncated state set.

    ``role_cells`` maps the user's full roles to their true cells; ``dwell_s``
    gives the dwell used to weight bucket places. States the user never has a
    location for are removed from the chain.
    """
    if role_seq.days < 2:
        raise InsufficientDataError(f"user {role_seq.user_id}: FEM needs at least 2 days")
    dwell_s = dwell_s or {}
    v = collapse_roles(role_seq.values)
    cells = {r: int(role_cells[r]) for r in (HOME, WORK, TOP_OTHER) if r in role_cells}
    if HOME not in cells:
        raise DataError(f"user {role_seq.user_id} has no HOME location")
    bucket = tuple((int(role_cells[r]), float(dwell_s.get(r, 1.0)))
                   for r in sorted(role_cells) if r >= BUCKET)
    present = np.zeros(FEM_STATES, dtype=bool)
    present[list(cells)] = True
    if bucket:
        present[BUCKET] = True
    counts = np.zeros((HOURS, FEM_STATES, FEM_STATES))
    np.add.at(counts, (np.arange(v.shape[0] - 1) % HOURS, v[:-1], v[1:]), 1.0)
    counts[:, :, ~present] = 0.0
    sm = np.where(present, smoothing, 0.0)
    num = counts + sm
    tot = num.sum(axis=2, keepdims=True)
    # rows never observed (possible only without smoothing) go uniform over the user's states
    T = np.where(tot > 0, num / np.where(tot > 0, tot, 1.0), present / present.sum())
    first = np.bincount(v[::HOURS], minlength=FEM_STATES).astype(float) * present
    pi = (first + sm) / (first.sum() + sm.sum())
    return FemModel(role_seq.user_id, pi, T, cells, bucket)


def fem_generate(model: FemModel, days: int, rng: np.random.Generator, start_day: int = 0,
                 jitter_m: float = 0.0, grid: Grid | None = None, tz_offset_s: int = 0):
    """Simulate the user's chain and geocode to their true places.

    Each contiguous run of bucket hours is sent to one of the user's other
    places, drawn with probability proportional to its dwell.
    Returns ``(Trajectory, collapsed RoleSequence)``.
    """
    states = gwg_sample_batch(model.pi[None], model.T[None], None, 1.0, days, rng)[0]
    seq = RoleSequence(model.user_id, start_day, states, L=FEM_STATES)
    if grid is None:
        raise ValueError("fem_generate needs the grid to geocode")
    cells = np.empty(states.shape[0], dtype=np.int64)
    if model.bucket:
        bcells = np.array([c for c, _ in model.bucket])
        bw = np.array([w for _, w in model.bucket], dtype=float)
        bw = bw / bw.sum() if bw.sum() > 0 else np.full(bw.shape, 1.0 / bw.size)
    prev = -1
    current_bucket = -1
    for t, s in enumerate(states):
        if s == BUCKET:
            if prev != BUCKET:
                current_bucket = int(bcells[rng.choice(bcells.size, p=bw)])
            cells[t] = current_bucket
        else:
            cells[t] = model.cells[int(s)]
        prev = s
    traj = geocode_cells(model.user_id, cells, start_day, grid, jitter_m, rng, tz_offset_s)
    return traj, seq


# ---------------------------------------------------------------------------
# TimeGeo / EPR
# ---------------------------------------------------------------------------
DEFAULT_RHO = 0.6
DEFAULT_GAMMA = 0.21
DEFAULT_ALPHA_R = 0.86


@dataclass(frozen=True, eq=False)
class TimeGeoParams:
    rhythm: np.ndarray  # (168,) move probability per week-hour, Monday 00:00 first
    rho: float = DEFAULT_RHO
    gamma: float = DEFAULT_GAMMA
    alpha_r: float = DEFAULT_ALPHA_R
    # recorded for completeness; the hourly-rhythm temporal layer does not use them
    n_w: float = 6.1
    beta1: float = 3.67
    beta2: float = 10.0
    flags: tuple = field(default=())

    def __post_init__(self):
        r = np.asarray(self.rhythm, dtype=float)
        if r.shape != (WEEK_HOURS,) or np.any(r < 0) or np.any(r > 1):
            raise DataError("rhythm must hold 168 probabilities")
        if not 0 < self.rho <= 1 or self.gamma < 0:
            raise DataError(f"invalid exploration parameters rho={self.rho}, gamma={self.gamma}")
        object.__setattr__(self, "rhythm", r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rhythm"] = self.rhythm.tolist()
        d["flags"] = list(self.flags)
        d["format"] = "geoavatar-timegeo-v1"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TimeGeoParams":
        d = {k: v for k, v in d.items() if k != "format"}
        d["flags"] = tuple(d.get("flags", ()))
        return cls(**d)


def week_hour(start_day: int, t) -> np.ndarray:
    return (weekday(start_day) * HOURS + np.asarray(t)) % WEEK_HOURS


def weekly_rhythm(cell_series) -> np.ndarray:
    """Fraction of observed user-hours in which the user changed cell, per week-hour.

    ``cell_series`` yields ``(start_day, hourly cells)``; -1 marks missing hours.
    """
    moves = np.zeros(WEEK_HOURS)
    seen = np.zeros(WEEK_HOURS)
    for start_day, cells in cell_series:
        cells = np.asarray(cells)
        ok = (cells[:-1] >= 0) & (cells[1:] >= 0)
        slots = week_hour(start_day, np.arange(1, cells.shape[0]))[ok]
        np.add.at(seen, slots, 1.0)
        np.add.at(moves, slots, (cells[1:] != cells[:-1])[ok].astype(float))
    return np.divide(moves, seen, out=np.zeros(WEEK_HOURS), where=seen > 0)


def exploration_stats(cell_series, grid: Grid):
    """Per-S move/new counts and the distance ranks of exploration targets."""
    n_moves: dict[int, int] = {}
    n_new: dict[int, int] = {}
    ranks: list[int] = []
    D = grid.distance_matrix_km
    for _, cells in cell_series:
        cells = [int(c) for c in cells if c >= 0]
        if not cells:
            continue
        visited = {cells[0]}
        for a, b in zip(cells[:-1], cells[1:]):
            if a == b:
                continue
            S = len(visited)
            n_moves[S] = n_moves.get(S, 0) + 1
            if b not in visited:
                n_new[S] = n_new.get(S, 0) + 1
                unvisited = np.array([c for c in range(grid.n_cells) if c not in visited])
                order = unvisited[np.argsort(D[a, unvisited], kind="stable")]
                ranks.append(int(np.flatnonzero(order == b)[0]) + 1)
                visited.add(b)
    return n_moves, n_new, ranks


def _loglog_slope(x, y):
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def timegeo_fit(cell_series, grid: Grid) -> TimeGeoParams:
    """Fit the weekly rhythm, exploration law ``rho * S^-gamma`` and rank exponent."""
    cell_series = [(int(d), np.asarray(c)) for d, c in cell_series]
    rhythm = weekly_rhythm(cell_series)
    n_moves, n_new, ranks = exploration_stats(cell_series, grid)
    if not n_moves:
        raise DataError("corpus contains no moves; cannot fit TimeGeo")
    flags = []
    pts = [(S, n_new.get(S, 0) / n_moves[S]) for S in sorted(n_moves) if n_new.get(S, 0) > 0]
    if len(pts) >= 2:
        slope, intercept = _loglog_slope(*zip(*pts))
        rho = float(np.clip(np.exp(intercept), 1e-6, 1.0))
        gamma = max(0.0, -slope)
    else:
        rho, gamma = DEFAULT_RHO, DEFAULT_GAMMA
        flags.append("exploration_fit_degenerate")
        log.info("TimeGeo exploration fit degenerate; using defaults rho=%s gamma=%s", rho, gamma)
    alpha_r = DEFAULT_ALPHA_R
    if len(set(ranks)) >= 2:
        r, c = np.unique(ranks, return_counts=True)
        slope, _ = _loglog_slope(r, c / c.sum())
        if slope < 0:
            alpha_r = -slope
        else:
            flags.append("rank_fit_degenerate")
    else:
        flags.append("rank_fit_degenerate")
    return TimeGeoParams(rhythm, rho, gamma, alpha_r, flags=tuple(flags))


def explore_probability(S: int, params: TimeGeoParams) -> float:
    return min(1.0, params.rho * float(S) ** (-params.gamma))


def epr_next_location(visited: dict, current: int, params: TimeGeoParams, grid: Grid,
                      rng: np.random.Generator) -> int:
    """Explore an unvisited cell (rank-distance law) or return by visit frequency."""
    if not visited:
        raise DataError("visited set must not be empty")
    S = len(visited)
    explore = rng.random() < explore_probability(S, params)
    if explore:
        mask = np.ones(grid.n_cells, dtype=bool)
        mask[list(visited)] = False
        unvisited = np.flatnonzero(mask)
        if unvisited.size:
            order = unvisited[np.argsort(grid.distance_matrix_km[current, unvisited], kind="stable")]
            w = np.arange(1, order.size + 1, dtype=float) ** (-params.alpha_r)
            return int(order[rng.choice(order.size, p=w / w.sum())])
        log.debug("every cell visited; forcing a return step")
    cells = np.array(sorted(visited))
    counts = np.array([visited[c] for c in cells], dtype=float)
    return int(cells[rng.choice(cells.size, p=counts / counts.sum())])


def timegeo_cells(params: TimeGeoParams, home: int, days: int, grid: Grid, rng: np.random.Generator,
                  start_day: int = 0) -> np.ndarray:
    n = days * HOURS
    out = np.empty(n, dtype=np.int64)
    cur = int(home)
    visited = {cur: 1}
    slots = week_hour(start_day, np.arange(n))
    for t in range(n):
        if t > 0:
            p_move = params.rhythm[slots[t]]
            if t % HOURS < 6 and cur != home:
                if rng.random() >= p_move:
                    cur = int(home)
                    visited[cur] = visited.get(cur, 0) + 1
            elif rng.random() < p_move:
                nxt = epr_next_location(visited, cur, params, grid, rng)
                visited[nxt] = visited.get(nxt, 0) + 1
                cur = nxt
        out[t] = cur
    return out


def timegeo_generate(params: TimeGeoParams, home: int, days: int, grid: Grid, rng: np.random.Generator,
                     start_day: int = 0, user_id: str = "", jitter_m: float = 0.0,
                     tz_offset_s: int = 0) -> Trajectory:
    cells = timegeo_cells(params, home, days, grid, rng, start_day)
    return geocode_cells(user_id, cells, start_day, grid, jitter_m, rng, tz_offset_s)
