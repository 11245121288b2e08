"""Key-location tables: demographics-conditioned choice of cells for abstract roles."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import EARTH_RADIUS_KM, HOME, WORK, Grid, LifePattern, RoleSequence, Trajectory
from .errors import AssignmentError, DataError

log = logging.getLogger(__name__)

M_PER_DEG = EARTH_RADIUS_KM * 1000 * math.pi / 180


@dataclass(frozen=True)
class UserAnchors:
    """Per-user ingredients for prior fitting: segment, home/work cells and OTHER dwell per cell."""

    segment: int
    home: int
    work: int | None = None
    other_dwell: dict = field(default_factory=dict)  # cell -> seconds


@dataclass(eq=False)
class SpatialPriors:
    """Smoothed home, commute and attractiveness distributions.

    Only counts are stored; distributions are derived so serialisation stays
    sparse. Commute rows back off to the segment's smoothed work marginal.
    """

    home_counts: np.ndarray  # (S, C)
    commute_counts: np.ndarray  # (S, C, C)
    other_dwell_h: np.ndarray  # (C,)
    smoothing: float = 0.5
    decay_km: float = 3.0

    @property
    def n_segments(self) -> int:
        return self.home_counts.shape[0]

    @property
    def n_cells(self) -> int:
        return self.home_counts.shape[1]

    def _segment_or_pooled(self, counts: np.ndarray, s: int, what: str) -> np.ndarray:
        if counts[s].sum() > 0:
            return counts[s]
        log.info("segment %d has no %s observations; using pooled estimate", s, what)
        return counts.sum(axis=0)

    def home_dist(self, s: int) -> np.ndarray:
        c = self._segment_or_pooled(self.home_counts, s, "home")
        return (c + self.smoothing) / (c.sum() + self.smoothing * self.n_cells)

    def work_marginal(self, s: int) -> np.ndarray:
        c = self._segment_or_pooled(self.commute_counts.sum(axis=1), s, "work")
        return (c + self.smoothing) / (c.sum() + self.smoothing * self.n_cells)

    def commute_od(self, s: int, home: int) -> np.ndarray:
        seg = self.commute_counts[s] if self.commute_counts[s].sum() > 0 else self.commute_counts.sum(axis=0)
        row = seg[home]
        k = self.smoothing * self.n_cells
        return (row + k * self.work_marginal(s)) / (row.sum() + k)

    @property
    def attractiveness(self) -> np.ndarray:
        return self.other_dwell_h + self.smoothing

    def to_dict(self) -> dict:
        S, C = self.home_counts.shape
        commute = []
        for s in range(S):
            hs, ws = np.nonzero(self.commute_counts[s])
            commute.append([[int(h), int(w), float(self.commute_counts[s, h, w])] for h, w in zip(hs, ws)])
        return {
            "format": "geoavatar-priors-v1",
            "n_segments": S,
            "n_cells": C,
            "smoothing": self.smoothing,
            "decay_km": self.decay_km,
            "home_counts": self.home_counts.tolist(),
            "commute_counts": commute,
            "other_dwell_h": self.other_dwell_h.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialPriors":
        S, C = int(d["n_segments"]), int(d["n_cells"])
        commute = np.zeros((S, C, C))
        for s, entries in enumerate(d["commute_counts"]):
            for h, w, c in entries:
                commute[s, h, w] = c
        return cls(np.asarray(d["home_counts"], dtype=float), commute,
                   np.asarray(d["other_dwell_h"], dtype=float), float(d["smoothing"]), float(d["decay_km"]))


def anchors_from_places(places, segment: int, grid: Grid) -> UserAnchors | None:
    """Reduce one user's significant places to cells; ``None`` if HOME is off-grid."""
    home = work = None
    other: dict[int, float] = {}
    for p in places:
        cell = grid.locate(p.lat, p.lon)
        if cell is None:
            continue
        if p.role == HOME:
            home = cell
        elif p.role == WORK:
            work = cell
        else:
            other[cell] = other.get(cell, 0.0) + p.total_dwell_s
    if home is None:
        return None
    return UserAnchors(segment, home, work, other)


def fit_spatial_priors(users, grid: Grid, n_segments: int, smoothing: float = 0.5,
                       decay_km: float = 3.0) -> SpatialPriors:
    users = list(users)
    if not users:
        raise DataError("no users to fit spatial priors on")
    C = grid.n_cells
    home = np.zeros((n_segments, C))
    commute = np.zeros((n_segments, C, C))
    dwell = np.zeros(C)
    for u in users:
        if not 0 <= u.segment < n_segments:
            raise DataError(f"segment {u.segment} outside [0, {n_segments})")
        home[u.segment, u.home] += 1
        if u.work is not None:
            commute[u.segment, u.home, u.work] += 1
        for cell, sec in u.other_dwell.items():
            dwell[cell] += sec / 3600.0
    return SpatialPriors(home, commute, dwell, smoothing, decay_km)


@dataclass(frozen=True)
class KeyLocationTable:
    cells: dict  # role -> cell id

    def __getitem__(self, role):
        return self.cells[role]

    def __contains__(self, role):
        return role in self.cells


def _choose(weights: np.ndarray, used: set, rng: np.random.Generator) -> int:
    w = weights.copy()
    if len(used) < w.shape[0]:
        idx = np.fromiter(used, dtype=np.int64, count=len(used))
        w[idx] = 0.0
        if w.sum() <= 0:
            w = weights.copy()
    cdf = np.cumsum(w)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), w.shape[0] - 1))


def other_weights(attractiveness: np.ndarray, anchors: list[int], grid: Grid, decay_km: float) -> np.ndarray:
    """``attractiveness * exp(-distance to nearest chosen anchor / decay)``."""
    if not math.isfinite(decay_km):
        return np.asarray(attractiveness, dtype=float).copy()
    dmin = grid.distance_matrix_km[anchors].min(axis=0)
    return attractiveness * np.exp(-dmin / decay_km)


def sample_key_table(profile, priors: SpatialPriors, pattern: LifePattern, grid: Grid,
                     rng: np.random.Generator, support_threshold: float = 1e-3,
                     extra_roles=()) -> KeyLocationTable:
    """Sequential choice: home, then work given home, then OTHER roles by occupancy.

    ``extra_roles`` forces roles below the support threshold into the table,
    e.g. rare roles that a sampled sequence happened to visit.
    """
    s = profile.segment if hasattr(profile, "segment") else int(profile)
    roles = set(pattern.support(support_threshold)) | {HOME} | {int(r) for r in extra_roles}
    used: set[int] = set()
    table = {}
    table[HOME] = _choose(priors.home_dist(s), used, rng)
    used.add(table[HOME])
    if WORK in roles:
        table[WORK] = _choose(priors.commute_od(s, table[HOME]), used, rng)
        used.add(table[WORK])
    occ = pattern.O.sum(axis=0)
    others = sorted((r for r in roles if r not in (HOME, WORK)), key=lambda r: (-occ[r], r))
    attr = priors.attractiveness
    for r in others:
        w = other_weights(attr, list(table.values()), grid, priors.decay_km)
        table[r] = _choose(w, used, rng)
        used.add(table[r])
    return KeyLocationTable(table)


def geocode_sequence(role_seq: RoleSequence, table: KeyLocationTable, grid: Grid, jitter_m: float = 50.0,
                     rng: np.random.Generator | None = None, tz_offset_s: int = 0) -> Trajectory:
    """One record per hour at the role's cell centre, jittered uniformly within a disc."""
    v = role_seq.values
    missing = sorted(set(np.unique(v).tolist()) - set(table.cells))
    if missing:
        raise AssignmentError(f"roles {missing} of {role_seq.user_id} have no key location")
    cells = np.array([table.cells[int(r)] for r in v], dtype=np.int64)
    return geocode_cells(role_seq.user_id, cells, role_seq.start_day, grid, jitter_m, rng, tz_offset_s)


def geocode_cells(user_id: str, cells, start_day: int, grid: Grid, jitter_m: float = 0.0,
                  rng: np.random.Generator | None = None, tz_offset_s: int = 0) -> Trajectory:
    """Hourly records at the given cells; jittered points are clipped to their cell."""
    cells = np.asarray(cells, dtype=np.int64)
    lat = grid.centers[cells, 0].copy()
    lon = grid.centers[cells, 1].copy()
    if jitter_m > 0:
        if rng is None:
            raise ValueError("jitter requires an rng")
        r = jitter_m * np.sqrt(rng.random(cells.shape[0]))
        theta = 2 * np.pi * rng.random(cells.shape[0])
        lat = lat + r * np.cos(theta) / M_PER_DEG
        lon = lon + r * np.sin(theta) / (M_PER_DEG * np.cos(np.radians(lat)))
        bounds = grid.bounds[cells]
        eps = 1e-9
        lat = np.clip(lat, bounds[:, 0] + eps, bounds[:, 1] - eps)
        lon = np.clip(lon, bounds[:, 2] + eps, bounds[:, 3] - eps)
    ts = start_day * 86400 - tz_offset_s + np.arange(cells.shape[0], dtype=np.int64) * 3600
    return Trajectory(user_id, ts, lat, lon)
