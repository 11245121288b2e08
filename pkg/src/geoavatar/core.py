"""Domain types, the spatial grid and life-pattern tensor algebra."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, DataError, ShapeError

EARTH_RADIUS_KM = 6371.0
HOURS = 24
HOME = 0
WORK = 1
DEFAULT_L = 12

_ROW_TOL = 1e-9


# ---------------------------------------------------------------------------
# Roles
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RoleAlphabet:
    size: int = DEFAULT_L

    def __post_init__(self):
        if self.size < 3:
            raise ConfigError(f"role alphabet needs at least 3 roles, got {self.size}")

    def name(self, role: int) -> str:
        if not 0 <= role < self.size:
            raise ValueError(f"role {role} outside alphabet of size {self.size}")
        if role == HOME:
            return "HOME"
        if role == WORK:
            return "WORK"
        return f"OTHER_{role - 1}"

    @property
    def names(self) -> list[str]:
        return [self.name(r) for r in range(self.size)]


# ---------------------------------------------------------------------------
# Life patterns
# ---------------------------------------------------------------------------
def occupancy(pi: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Push the hour-0 distribution forward through the hourly transitions.

    Every caller that needs O goes through here so the arithmetic path is
    always the same.
    """
    O = np.empty((HOURS, pi.shape[0]))
    O[0] = pi
    for h in range(HOURS - 1):
        O[h + 1] = O[h] @ T[h]
    return O


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LifePattern:
    """Hourly role-transition graph of one person.

    ``T[h, i, j]`` is the probability of role ``j`` at hour ``h + 1`` given
    role ``i`` at hour ``h``; ``T[23]`` carries the night into the next day.
    """

    pi: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        pi = _frozen(self.pi)
        T = _frozen(self.T)
        if pi.ndim != 1 or T.shape != (HOURS, pi.shape[0], pi.shape[0]):
            raise ShapeError(f"pattern shapes mismatch: pi {pi.shape}, T {T.shape}")
        if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(T))):
            raise DataError("life pattern contains non-finite entries")
        if np.any(pi < 0) or np.any(T < 0):
            raise DataError("life pattern contains negative probabilities")
        if abs(pi.sum() - 1.0) > _ROW_TOL or np.any(np.abs(T.sum(axis=2) - 1.0) > _ROW_TOL):
            raise DataError("life pattern rows must sum to 1")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "T", T)

    @property
    def L(self) -> int:
        return self.pi.shape[0]

    @cached_property
    def O(self) -> np.ndarray:
        O = occupancy(self.pi, self.T)
        O.setflags(write=False)
        return O

    def __eq__(self, other):
        if not isinstance(other, LifePattern):
            return NotImplemented
        return np.array_equal(self.pi, other.pi) and np.array_equal(self.T, other.T)

    __hash__ = None

    def support(self, threshold: float = 1e-3) -> list[int]:
        """Roles whose occupancy exceeds ``threshold`` at some hour."""
        return [int(r) for r in np.flatnonzero(self.O.max(axis=0) > threshold)]


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def normalize_pattern(raw_T, raw_pi) -> LifePattern:
    """Project unconstrained logits onto the simplex with a per-row softmax."""
    raw_T = np.asarray(raw_T, dtype=float)
    raw_pi = np.asarray(raw_pi, dtype=float)
    if not (np.all(np.isfinite(raw_T)) and np.all(np.isfinite(raw_pi))):
        raise DataError("non-finite logits passed to normalize_pattern")
    L = raw_pi.shape[0]
    if raw_T.shape != (HOURS, L, L):
        raise ShapeError(f"expected logits of shape {(HOURS, L, L)}, got {raw_T.shape}")
    return LifePattern(pi=_softmax(raw_pi), T=_softmax(raw_T, axis=2))


def pattern_dim(L: int) -> int:
    return HOURS * L * L + L


def alphabet_from_dim(dim: int) -> int:
    # dim = 24 L^2 + L  ->  positive root of 24 L^2 + L - dim = 0
    L = int(round((-1 + math.sqrt(1 + 96 * dim)) / 48))
    if L < 1 or pattern_dim(L) != dim:
        raise ShapeError(f"{dim} is not a valid pattern vector dimension")
    return L


def vectorize(pattern: LifePattern) -> np.ndarray:
    """Flatten to ``[pi, T[0,0,:], T[0,1,:], ...]``."""
    return np.concatenate([pattern.pi, pattern.T.reshape(-1)])


def _renormalize_rows(rows: np.ndarray) -> np.ndarray:
    # valid rows are left bit-for-bit untouched so devectorize(vectorize(p)) == p
    sums = rows.sum(axis=-1, keepdims=True)
    bad = np.abs(sums - 1.0) > _ROW_TOL
    if np.any(sums[bad] <= 0):
        raise DataError("cannot renormalize a row with non-positive mass")
    return np.where(bad, rows / np.where(bad, sums, 1.0), rows)


def devectorize(vector, L: int | None = None) -> LifePattern:
    v = np.asarray(vector, dtype=float)
    if v.ndim != 1:
        raise ShapeError(f"pattern vector must be 1-D, got shape {v.shape}")
    if L is None:
        L = alphabet_from_dim(v.shape[0])
    elif v.shape[0] != pattern_dim(L):
        raise ShapeError(f"expected vector of length {pattern_dim(L)}, got {v.shape[0]}")
    if np.any(v < 0):
        raise DataError("pattern vector has negative entries")
    pi = _renormalize_rows(v[:L])
    T = _renormalize_rows(v[L:].reshape(HOURS, L, L))
    return LifePattern(pi=pi, T=T)


def pattern_to_dict(pattern: LifePattern) -> dict:
    return {"pi": pattern.pi.tolist(), "T": pattern.T.tolist()}


def pattern_from_dict(d: dict) -> LifePattern:
    return LifePattern(pi=np.asarray(d["pi"], dtype=float), T=np.asarray(d["T"], dtype=float))


# ---------------------------------------------------------------------------
# Geography
# ---------------------------------------------------------------------------
def haversine_km(p1, p2) -> float:
    """Great-circle distance between two ``(lat, lon)`` points in degrees."""
    lat1, lon1 = map(math.radians, p1)
    lat2, lon2 = map(math.radians, p2)
    a = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def haversine_km_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorised haversine; arguments broadcast."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(a, dtype=float)) for a in (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def _snap(x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Round values within ``tol`` of an integer so edge points are not lost to float error."""
    r = np.round(x)
    return np.where(np.abs(x - r) < tol, r, x)


@dataclass(frozen=True)
class Grid:
    """Regular lat/lon tiling of a bounding box; cells are row-major from the SW corner."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_size_m: float
    n_rows: int
    n_cols: int

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return (self.lat_min, self.lat_max, self.lon_min, self.lon_max)

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def dlat(self) -> float:
        height_m = haversine_km((self.lat_min, self._lon_c), (self.lat_max, self._lon_c)) * 1000
        return (self.lat_max - self.lat_min) * self.cell_size_m / height_m

    @property
    def dlon(self) -> float:
        width_m = haversine_km((self._lat_c, self.lon_min), (self._lat_c, self.lon_max)) * 1000
        return (self.lon_max - self.lon_min) * self.cell_size_m / width_m

    @property
    def _lat_c(self) -> float:
        return 0.5 * (self.lat_min + self.lat_max)

    @property
    def _lon_c(self) -> float:
        return 0.5 * (self.lon_min + self.lon_max)

    def contains(self, lat, lon):
        lat = np.asarray(lat)
        lon = np.asarray(lon)
        return (lat >= self.lat_min) & (lat <= self.lat_max) & (lon >= self.lon_min) & (lon <= self.lon_max)

    def locate(self, lat: float, lon: float) -> int | None:
        """Cell id of a point, or ``None`` when it falls outside the bbox."""
        cell = self.locate_array(np.array([lat]), np.array([lon]))[0]
        return None if cell < 0 else int(cell)

    def locate_array(self, lat, lon) -> np.ndarray:
        """Vectorised :meth:`locate`; out-of-bbox points get -1."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        # ceil(x) - 1 sends a point on an interior edge to the lower cell
        rows = np.clip(np.ceil(_snap((lat - self.lat_min) / self.dlat)) - 1, 0, self.n_rows - 1).astype(np.int64)
        cols = np.clip(np.ceil(_snap((lon - self.lon_min) / self.dlon)) - 1, 0, self.n_cols - 1).astype(np.int64)
        cells = rows * self.n_cols + cols
        return np.where(self.contains(lat, lon), cells, -1)

    def cell_bounds(self, cell: int) -> tuple[float, float, float, float]:
        """``(lat_lo, lat_hi, lon_lo, lon_hi)`` of the cell clipped to the bbox."""
        r, c = divmod(int(cell), self.n_cols)
        lat_lo = self.lat_min + r * self.dlat
        lon_lo = self.lon_min + c * self.dlon
        return (
            lat_lo,
            min(lat_lo + self.dlat, self.lat_max),
            lon_lo,
            min(lon_lo + self.dlon, self.lon_max),
        )

    def cell_center(self, cell: int) -> tuple[float, float]:
        lat_lo, lat_hi, lon_lo, lon_hi = self.cell_bounds(cell)
        return (0.5 * (lat_lo + lat_hi), 0.5 * (lon_lo + lon_hi))

    @cached_property
    def centers(self) -> np.ndarray:
        """``(n_cells, 2)`` array of cell centres."""
        c = np.array([self.cell_center(i) for i in range(self.n_cells)])
        c.setflags(write=False)
        return c

    @cached_property
    def bounds(self) -> np.ndarray:
        """``(n_cells, 4)`` array of :meth:`cell_bounds`."""
        b = np.array([self.cell_bounds(i) for i in range(self.n_cells)])
        b.setflags(write=False)
        return b

    @cached_property
    def distance_matrix_km(self) -> np.ndarray:
        c = self.centers
        d = haversine_km_array(c[:, None, 0], c[:, None, 1], c[None, :, 0], c[None, :, 1])
        d.setflags(write=False)
        return d

    def to_dict(self) -> dict:
        return {
            "bbox": [self.lat_min, self.lat_max, self.lon_min, self.lon_max],
            "cell_size_m": self.cell_size_m,
        }


def build_grid(bbox, cell_size_m: float) -> Grid:
    lat_min, lat_max, lon_min, lon_max = map(float, bbox)
    if not cell_size_m > 0:
        raise ConfigError(f"cell_size_m must be positive, got {cell_size_m}")
    if not (lat_min < lat_max and lon_min < lon_max):
        raise ConfigError(f"degenerate bbox {bbox}")
    if not (-90 <= lat_min and lat_max <= 90 and -180 <= lon_min and lon_max <= 180):
        raise ConfigError(f"bbox {bbox} outside valid coordinates")
    lat_c = 0.5 * (lat_min + lat_max)
    lon_c = 0.5 * (lon_min + lon_max)
    height_m = haversine_km((lat_min, lon_c), (lat_max, lon_c)) * 1000
    width_m = haversine_km((lat_c, lon_min), (lat_c, lon_max)) * 1000
    # tolerance absorbs float noise in bboxes built from exact metric extents
    n_rows = max(1, math.ceil(height_m / cell_size_m - 1e-6))
    n_cols = max(1, math.ceil(width_m / cell_size_m - 1e-6))
    return Grid(lat_min, lat_max, lon_min, lon_max, float(cell_size_m), n_rows, n_cols)


def bbox_from_extent(lat_c: float, lon_c: float, height_km: float, width_km: float):
    """Bbox centred on a point with the given geodesic extents."""
    dlat = math.degrees(height_km / EARTH_RADIUS_KM)
    # invert haversine along the parallel through lat_c
    s = math.sin(width_km / (2 * EARTH_RADIUS_KM)) / math.cos(math.radians(lat_c))
    dlon = math.degrees(2 * math.asin(s))
    return (lat_c - dlat / 2, lat_c + dlat / 2, lon_c - dlon / 2, lon_c + dlon / 2)


# ---------------------------------------------------------------------------
# Trajectories and role sequences
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Trajectory:
    user_id: str
    timestamps: np.ndarray
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        lat = np.asarray(self.lat, dtype=float)
        lon = np.asarray(self.lon, dtype=float)
        if not (ts.shape == lat.shape == lon.shape) or ts.ndim != 1:
            raise ShapeError("trajectory columns must be equal-length 1-D arrays")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise DataError(f"timestamps of user {self.user_id} are not strictly increasing")
        if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
            raise DataError(f"coordinates of user {self.user_id} out of range")
        for name, a in (("timestamps", ts), ("lat", lat), ("lon", lon)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return int(self.timestamps.shape[0])


@dataclass(frozen=True, eq=False)
class RoleSequence:
    user_id: str
    start_day: int
    values: np.ndarray
    L: int = field(default=DEFAULT_L)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        if v.ndim != 1 or v.shape[0] % HOURS:
            raise ShapeError(f"role sequence length {v.shape} is not a whole number of days")
        if v.size and (v.min() < 0 or v.max() >= self.L):
            raise DataError(f"role ids of user {self.user_id} outside [0, {self.L})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def days(self) -> int:
        return self.values.shape[0] // HOURS

    def by_day(self) -> np.ndarray:
        return self.values.reshape(self.days, HOURS)
