"""GPS corpus ingestion: staypoints, significant places, hourly roles, empirical patterns."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_L,
    HOME,
    HOURS,
    WORK,
    LifePattern,
    RoleSequence,
    Trajectory,
    haversine_km_array,
)
from .errors import InsufficientDataError

log = logging.getLogger(__name__)

DAY_S = 86400
HOUR_S = 3600
NIGHT_WINDOW = (0, 6)
WORK_WINDOW = (9, 17)


@dataclass(frozen=True)
class StayPoint:
    user_id: str
    lat: float
    lon: float
    arrival: int
    departure: int

    @property
    def duration_s(self) -> int:
        return self.departure - self.arrival


@dataclass(frozen=True)
class SignificantPlace:
    user_id: str
    role: int
    lat: float
    lon: float
    visit_count: int
    total_dwell_s: int
    members: tuple[int, ...] = ()
    fallback: bool = False


def weekday(day: int) -> int:
    """Monday=0 weekday of an epoch day (1970-01-01 was a Thursday)."""
    return (day + 3) % 7


def detect_staypoints(traj: Trajectory, dist_m: float = 200.0, min_stay_s: int = 1800,
                      max_gap_s: int | None = None) -> list[StayPoint]:
    """Sequential anchor-window staypoint detection.

    The window grows while every point stays within ``dist_m`` of the anchor;
    it is also cut at any sampling gap longer than ``max_gap_s`` (defaults to
    ``min_stay_s``) so dwells are never bridged across missing data.
    """
    n = len(traj)
    if n == 0:
        return []
    if max_gap_s is None:
        max_gap_s = min_stay_s
    ts, lat, lon = traj.timestamps, traj.lat, traj.lon
    gap_break = np.flatnonzero(np.diff(ts) > max_gap_s) + 1
    limit_of = np.full(n, n, dtype=np.int64)
    start = 0
    for b in gap_break:
        limit_of[start:b] = b
        start = b

    out: list[StayPoint] = []
    chunk = 64
    i = 0
    while i < n:
        limit = limit_of[i]
        j = i + 1
        while j < limit:
            hi = min(limit, j + chunk)
            d = haversine_km_array(lat[i], lon[i], lat[j:hi], lon[j:hi]) * 1000
            far = np.flatnonzero(d > dist_m)
            if far.size:
                j += int(far[0])
                break
            j = hi
        if ts[j - 1] - ts[i] >= min_stay_s:
            out.append(StayPoint(
                traj.user_id,
                float(lat[i:j].mean()),
                float(lon[i:j].mean()),
                int(ts[i]),
                int(ts[j - 1]),
            ))
            i = j
        else:
            i += 1
    return out


def _window_overlap(arrival: int, departure: int, window: tuple[int, int], tz_offset_s: int,
                    weekdays_only: bool = False) -> int:
    a = arrival + tz_offset_s
    b = departure + tz_offset_s
    total = 0
    for day in range(a // DAY_S, b // DAY_S + 1):
        if weekdays_only and weekday(day) >= 5:
            continue
        lo = day * DAY_S + window[0] * HOUR_S
        hi = day * DAY_S + window[1] * HOUR_S
        total += max(0, min(b, hi) - max(a, lo))
    return total


def _cluster(staypoints: list[StayPoint], merge_radius_m: float) -> list[list[int]]:
    order = sorted(range(len(staypoints)), key=lambda k: staypoints[k].arrival)
    members: list[list[int]] = []
    cents = np.empty((0, 2))
    for k in order:
        sp = staypoints[k]
        if members:
            d = haversine_km_array(sp.lat, sp.lon, cents[:, 0], cents[:, 1]) * 1000
            best = int(np.argmin(d))
            if d[best] <= merge_radius_m:
                members[best].append(k)
                m = len(members[best])
                cents[best] = cents[best] + (np.array([sp.lat, sp.lon]) - cents[best]) / m
                continue
        members.append([k])
        cents = np.vstack([cents, [sp.lat, sp.lon]])
    return members


def extract_significant_places(staypoints: list[StayPoint], merge_radius_m: float = 300.0,
                               L: int = DEFAULT_L, tz_offset_s: int = 0,
                               keep_all: bool = False) -> list[SignificantPlace]:
    """Cluster staypoints and label clusters HOME / WORK / OTHER_k.

    With ``keep_all`` the OTHER list is not truncated to ``L - 2`` and role ids
    may exceed the alphabet; this ranked form feeds the reconstruction study.
    """
    if not staypoints:
        raise InsufficientDataError("no staypoints to extract places from")
    user = staypoints[0].user_id
    clusters = _cluster(staypoints, merge_radius_m)
    stats = []
    for mem in clusters:
        sps = [staypoints[k] for k in mem]
        stats.append({
            "members": tuple(sorted(mem, key=lambda k: staypoints[k].arrival)),
            "lat": float(np.mean([s.lat for s in sps])),
            "lon": float(np.mean([s.lon for s in sps])),
            "visits": len(sps),
            "dwell": int(sum(s.duration_s for s in sps)),
            "first": min(s.arrival for s in sps),
            "night": sum(_window_overlap(s.arrival, s.departure, NIGHT_WINDOW, tz_offset_s) for s in sps),
            "day": sum(_window_overlap(s.arrival, s.departure, WORK_WINDOW, tz_offset_s, True) for s in sps),
        })

    def by_dwell(key):
        return max(range(len(stats)), key=lambda c: (stats[c][key], stats[c]["dwell"], -stats[c]["first"]))

    fallback = False
    home = by_dwell("night")
    if stats[home]["night"] <= 0:
        home = by_dwell("dwell")
        fallback = True
        log.info("user %s has no night-time dwell; HOME falls back to max-dwell place", user)

    work = None
    candidates = [c for c in range(len(stats)) if c != home and stats[c]["day"] > 0]
    if candidates:
        work = max(candidates, key=lambda c: (stats[c]["day"], stats[c]["dwell"], -stats[c]["first"]))

    others = [c for c in range(len(stats)) if c not in (home, work)]
    others.sort(key=lambda c: (-stats[c]["visits"], -stats[c]["dwell"], stats[c]["first"]))
    if not keep_all:
        others = others[: L - 2]

    def place(c, role, flag=False):
        s = stats[c]
        return SignificantPlace(user, role, s["lat"], s["lon"], s["visits"], s["dwell"], s["members"], flag)

    places = [place(home, HOME, fallback)]
    if work is not None:
        places.append(place(work, WORK))
    places.extend(place(c, 2 + k) for k, c in enumerate(others))
    return places


def hourly_labels(intervals, labels, start_ts: int, n_hours: int) -> np.ndarray:
    """Label each hour by the interval label covering most of it.

    ``intervals`` are ``(arrival, departure)`` pairs. Ties go to the label whose
    coverage starts earlier in the hour. Uncovered hours get -1.
    """
    n_labels = int(max(labels)) + 1 if len(labels) else 0
    cover = np.zeros((n_hours, max(n_labels, 1)))
    first = np.full((n_hours, max(n_labels, 1)), np.iinfo(np.int64).max, dtype=np.int64)
    end_ts = start_ts + n_hours * HOUR_S
    for (a, b), lab in zip(intervals, labels):
        a = max(a, start_ts)
        b = min(b, end_ts)
        if b <= a:
            continue
        for h in range((a - start_ts) // HOUR_S, (b - 1 - start_ts) // HOUR_S + 1):
            lo = start_ts + h * HOUR_S
            ov = min(b, lo + HOUR_S) - max(a, lo)
            if ov > 0:
                cover[h, lab] += ov
                first[h, lab] = min(first[h, lab], max(a, lo))
    out = np.full(n_hours, -1, dtype=np.int64)
    covered = cover.max(axis=1) > 0
    for h in np.flatnonzero(covered):
        best = np.flatnonzero(cover[h] == cover[h].max())
        out[h] = best[np.argmin(first[h, best])]
    return out


def fill_forward(labels: np.ndarray, initial: int = HOME) -> np.ndarray:
    """Carry the previous label over uncovered (-1) hours."""
    out = labels.copy()
    prev = initial
    for k in range(out.shape[0]):
        if out[k] < 0:
            out[k] = prev
        else:
            prev = out[k]
    return out


def _staypoint_roles(staypoints, places):
    role_of = {}
    for p in places:
        for k in p.members:
            role_of[k] = p.role
    keep = [k for k in range(len(staypoints)) if k in role_of]
    intervals = [(staypoints[k].arrival, staypoints[k].departure) for k in keep]
    return intervals, [role_of[k] for k in keep]


def to_hourly_roles(staypoints: list[StayPoint], places: list[SignificantPlace], day_range: tuple[int, int],
                    L: int = DEFAULT_L, tz_offset_s: int = 0) -> RoleSequence:
    """Discretise staypoints into an hourly role sequence over ``day_range = (start_day, n_days)``.

    Hours spent at truncated places or in transit carry the previous role.
    """
    start_day, n_days = day_range
    user = places[0].user_id if places else (staypoints[0].user_id if staypoints else "")
    intervals, labels = _staypoint_roles(staypoints, places)
    start_ts = start_day * DAY_S - tz_offset_s
    raw = hourly_labels(intervals, labels, start_ts, n_days * HOURS)
    return RoleSequence(user, start_day, fill_forward(raw), L=L)


def extract_life_pattern(role_seq: RoleSequence, smoothing: float = 0.01) -> LifePattern:
    """Count-based hourly transition tensor with additive smoothing."""
    if role_seq.days < 2:
        raise InsufficientDataError(f"user {role_seq.user_id}: need at least 2 days, got {role_seq.days}")
    L = role_seq.L
    v = role_seq.values
    counts = np.zeros((HOURS, L, L))
    hours = np.arange(v.shape[0] - 1) % HOURS
    np.add.at(counts, (hours, v[:-1], v[1:]), 1.0)
    T = (counts + smoothing) / (counts.sum(axis=2, keepdims=True) + smoothing * L)
    first = np.bincount(role_seq.by_day()[:, 0], minlength=L).astype(float)
    pi = (first + smoothing) / (first.sum() + smoothing * L)
    return LifePattern(pi=pi, T=T)


# ---------------------------------------------------------------------------
# Hourly cell representation (generator-agnostic view used by evaluation)
# ---------------------------------------------------------------------------
def hourly_cells(traj: Trajectory, grid, start_ts: int, n_hours: int) -> np.ndarray:
    """Most frequent grid cell of each hour's records (-1 when none).

    Ties go to the cell recorded first within the hour.
    """
    out = np.full(n_hours, -1, dtype=np.int64)
    if len(traj) == 0:
        return out
    cells = grid.locate_array(traj.lat, traj.lon)
    hours = (traj.timestamps - start_ts) // HOUR_S
    ok = (cells >= 0) & (hours >= 0) & (hours < n_hours)
    cells, hours = cells[ok], hours[ok]
    if cells.size == 0:
        return out
    bounds = np.flatnonzero(np.diff(hours)) + 1
    for hseg, cseg in zip(np.split(hours, bounds), np.split(cells, bounds)):
        if cseg.size == 1 or np.all(cseg == cseg[0]):
            out[hseg[0]] = cseg[0]
            continue
        uniq, first_idx, counts = np.unique(cseg, return_index=True, return_counts=True)
        best = np.flatnonzero(counts == counts.max())
        out[hseg[0]] = uniq[best[np.argmin(first_idx[best])]]
    return out


def cell_visits(cells: np.ndarray, start_ts: int):
    """Split an hourly cell series into ``(cell, arrival, departure)`` runs; -1 hours break runs."""
    runs = []
    k = 0
    n = cells.shape[0]
    while k < n:
        if cells[k] < 0:
            k += 1
            continue
        j = k
        while j + 1 < n and cells[j + 1] == cells[k]:
            j += 1
        runs.append((int(cells[k]), start_ts + k * HOUR_S, start_ts + (j + 1) * HOUR_S))
        k = j + 1
    return runs


def roles_from_cells(user_id: str, cells: np.ndarray, start_day: int, L: int = DEFAULT_L,
                     tz_offset_s: int = 0) -> tuple[RoleSequence, dict[int, int]]:
    """Role sequence for hourly cell data, treating each cell run as a one-place visit.

    Returns the sequence and the ``role -> cell`` map. Labelling mirrors
    :func:`extract_significant_places` at cell resolution.
    """
    start_ts = start_day * DAY_S - tz_offset_s
    runs = cell_visits(cells, start_ts)
    if not runs:
        return RoleSequence(user_id, start_day, np.full(cells.shape[0], HOME), L=L), {}
    stats: dict[int, dict] = {}
    for cell, a, b in runs:
        s = stats.setdefault(cell, {"visits": 0, "dwell": 0, "first": a, "night": 0, "day": 0})
        s["visits"] += 1
        s["dwell"] += b - a
        s["night"] += _window_overlap(a, b, NIGHT_WINDOW, tz_offset_s)
        s["day"] += _window_overlap(a, b, WORK_WINDOW, tz_offset_s, True)
    ids = list(stats)
    home = max(ids, key=lambda c: (stats[c]["night"], stats[c]["dwell"], -stats[c]["first"]))
    if stats[home]["night"] <= 0:
        home = max(ids, key=lambda c: (stats[c]["dwell"], -stats[c]["first"]))
    cand = [c for c in ids if c != home and stats[c]["day"] > 0]
    work = max(cand, key=lambda c: (stats[c]["day"], stats[c]["dwell"], -stats[c]["first"])) if cand else None
    others = sorted((c for c in ids if c not in (home, work)),
                    key=lambda c: (-stats[c]["visits"], -stats[c]["dwell"], stats[c]["first"]))[: L - 2]
    role_cell = {HOME: home}
    if work is not None:
        role_cell[WORK] = work
    for k, c in enumerate(others):
        role_cell[2 + k] = c
    cell_role = {c: r for r, c in role_cell.items()}
    raw = np.array([cell_role.get(int(c), -1) if c >= 0 else -1 for c in cells], dtype=np.int64)
    return RoleSequence(user_id, start_day, fill_forward(raw), L=L), role_cell
