"""On-disk formats: trajectory, places, role-sequence, census and key-table CSVs plus JSON artifacts."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .core import LifePattern, RoleSequence, Trajectory, pattern_from_dict, pattern_to_dict
from .errors import DataError, MissingArtifactError

TRAJ_COLUMNS = ["user_id", "timestamp", "lat", "lon"]
PLACE_COLUMNS = ["user_id", "role", "lat", "lon", "visits", "dwell_s"]
ROLE_COLUMNS = ["user_id", "start_day", "L", "roles"]
KEY_COLUMNS = ["pseudo_id", "role", "cell_id"]
COORD_FORMAT = "%.7f"
PATTERNS_FORMAT = "geoavatar-patterns-v1"


def atomic_write_text(path, text: str) -> Path:
    """Write through a temp file in the target directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        # mkstemp creates 0600 files; give artifacts the usual umask-based mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path, producer: str | None = None):
    path = Path(path)
    if not path.exists():
        if producer:
            raise MissingArtifactError(path, producer)
        raise DataError(f"{path} does not exist")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_frame(path, df: pd.DataFrame, float_format=None) -> Path:
    return atomic_write_text(path, df.to_csv(index=False, float_format=float_format, lineterminator="\n"))


def _read_frame(path, columns, producer=None, dtype=None) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        if producer:
            raise MissingArtifactError(path, producer)
        raise DataError(f"{path} does not exist")
    df = pd.read_csv(path, dtype=dtype, keep_default_na=False)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return df


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------
def write_trajectories(path, trajectories) -> Path:
    parts = [pd.DataFrame({"user_id": np.full(len(t), t.user_id, dtype=object), "timestamp": t.timestamps,
                           "lat": t.lat, "lon": t.lon}) for t in trajectories if len(t)]
    df = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=TRAJ_COLUMNS)
    return _write_frame(path, df[TRAJ_COLUMNS], COORD_FORMAT)


def read_trajectories(path, producer: str | None = None) -> list[Trajectory]:
    """Group rows by user (sorted by id) and time; duplicate timestamps are rejected."""
    df = _read_frame(path, TRAJ_COLUMNS, producer, dtype={"user_id": str})
    if df.empty:
        return []
    df = df.sort_values(["user_id", "timestamp"], kind="stable")
    out = []
    for uid, g in df.groupby("user_id", sort=True):
        out.append(Trajectory(str(uid), g["timestamp"].to_numpy(np.int64), g["lat"].to_numpy(float),
                              g["lon"].to_numpy(float)))
    return out


# ---------------------------------------------------------------------------
# Places
# ---------------------------------------------------------------------------
def write_places(path, places_by_user: dict) -> Path:
    rows = [(uid, p.role, p.lat, p.lon, p.visit_count, p.total_dwell_s)
            for uid in sorted(places_by_user) for p in places_by_user[uid]]
    return _write_frame(path, pd.DataFrame(rows, columns=PLACE_COLUMNS), COORD_FORMAT)


def read_places(path, producer: str | None = None) -> pd.DataFrame:
    return _read_frame(path, PLACE_COLUMNS, producer, dtype={"user_id": str})


# ---------------------------------------------------------------------------
# Role sequences and patterns
# ---------------------------------------------------------------------------
def write_role_sequences(path, seqs) -> Path:
    rows = [(s.user_id, s.start_day, s.L, " ".join(map(str, s.values.tolist()))) for s in seqs]
    return _write_frame(path, pd.DataFrame(rows, columns=ROLE_COLUMNS))


def read_role_sequences(path, producer: str | None = None) -> list[RoleSequence]:
    df = _read_frame(path, ROLE_COLUMNS, producer, dtype={"user_id": str, "roles": str})
    return [RoleSequence(r.user_id, int(r.start_day), np.array(r.roles.split(), dtype=np.int64), L=int(r.L))
            for r in df.itertuples(index=False)]


def patterns_to_json(patterns: dict) -> dict:
    Ls = {p.L for p in patterns.values()}
    return {"format": PATTERNS_FORMAT, "L": Ls.pop() if len(Ls) == 1 else None,
            "patterns": {uid: pattern_to_dict(p) for uid, p in sorted(patterns.items())}}


def patterns_from_json(d: dict) -> dict[str, LifePattern]:
    if d.get("format") != PATTERNS_FORMAT:
        raise DataError(f"unsupported pattern format {d.get('format')!r}")
    return {uid: pattern_from_dict(p) for uid, p in d["patterns"].items()}


# ---------------------------------------------------------------------------
# Census and key tables
# ---------------------------------------------------------------------------
def write_census(path, marginals: dict) -> Path:
    S = len(next(iter(marginals.values())))
    rows = [[z] + list(map(float, marginals[z])) for z in sorted(marginals, key=str)]
    return _write_frame(path, pd.DataFrame(rows, columns=["zone_id"] + [f"segment_{s}" for s in range(S)]))


def read_census(path) -> dict:
    """``{zone_id: fractions}``; zone ids are kept as strings."""
    df = _read_frame(path, ["zone_id"], dtype={"zone_id": str})
    seg_cols = [c for c in df.columns if c.startswith("segment_")]
    if not seg_cols:
        raise DataError(f"{path}: no segment columns")
    seg_cols.sort(key=lambda c: int(c.split("_")[1]))
    out = {}
    for r in df.itertuples(index=False):
        row = r._asdict()
        p = np.array([row[c] for c in seg_cols], dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
            raise DataError(f"census row for zone {row['zone_id']!r} does not sum to 1")
        out[str(row["zone_id"])] = p
    return out


def write_key_tables(path, tables: dict) -> Path:
    rows = [(pid, int(role), int(cell)) for pid in sorted(tables) for role, cell in sorted(tables[pid].cells.items())]
    return _write_frame(path, pd.DataFrame(rows, columns=KEY_COLUMNS))


def write_curve(path, rows: list[dict], columns: list[str]) -> Path:
    return _write_frame(path, pd.DataFrame(rows, columns=columns), "%.10g")
