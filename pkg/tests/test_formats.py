import os

import numpy as np
import pytest

from geoavatar.core import HOURS, RoleSequence, Trajectory, normalize_pattern
from geoavatar.errors import DataError, MissingArtifactError
from geoavatar.formats import (atomic_write_text, patterns_from_json, patterns_to_json, read_census, read_json,
                               read_role_sequences, read_trajectories, write_census, write_role_sequences,
                               write_trajectories)


def test_trajectory_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    trajs = [Trajectory(uid, np.cumsum(rng.integers(1, 900, 20)), 35 + rng.random(20), 139 + rng.random(20))
             for uid in ("b", "a", "007")]
    path = write_trajectories(tmp_path / "t.csv", trajs)
    assert path.read_text().splitlines()[0] == "user_id,timestamp,lat,lon"
    back = read_trajectories(path)
    assert [t.user_id for t in back] == ["007", "a", "b"]
    for t in back:
        src = next(s for s in trajs if s.user_id == t.user_id)
        assert np.array_equal(t.timestamps, src.timestamps)
        np.testing.assert_allclose(t.lat, src.lat, atol=1e-7)
        np.testing.assert_allclose(t.lon, src.lon, atol=1e-7)


def test_empty_trajectory_file_has_header(tmp_path):
    path = write_trajectories(tmp_path / "e.csv", [])
    assert path.read_text() == "user_id,timestamp,lat,lon\n"
    assert read_trajectories(path) == []


def test_missing_file_names_producer(tmp_path):
    with pytest.raises(MissingArtifactError, match="geoavatar ingest"):
        read_trajectories(tmp_path / "nope.csv", producer="ingest")
    with pytest.raises(DataError):
        read_json(tmp_path / "nope.json")


def test_missing_columns(tmp_path):
    (tmp_path / "bad.csv").write_text("user_id,timestamp,lat\nu,0,35\n")
    with pytest.raises(DataError, match="lon"):
        read_trajectories(tmp_path / "bad.csv")


def test_role_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    seqs = [RoleSequence("u1", 19723, rng.integers(0, 5, 2 * HOURS), L=5),
            RoleSequence("u2", 19724, rng.integers(0, 5, HOURS), L=5)]
    back = read_role_sequences(write_role_sequences(tmp_path / "r.csv", seqs))
    for a, b in zip(seqs, back):
        assert (a.user_id, a.start_day, a.L) == (b.user_id, b.start_day, b.L)
        assert np.array_equal(a.values, b.values)


def test_pattern_json_roundtrip():
    rng = np.random.default_rng(2)
    pats = {f"p{i}": normalize_pattern(rng.normal(size=(HOURS, 4, 4)), rng.normal(size=4)) for i in range(3)}
    back = patterns_from_json(patterns_to_json(pats))
    assert all(back[k] == pats[k] for k in pats)
    with pytest.raises(DataError):
        patterns_from_json({"format": "other", "patterns": {}})


def test_census_roundtrip_and_validation(tmp_path):
    census = {"10": np.array([0.25, 0.75]), "3": np.array([1.0, 0.0])}
    back = read_census(write_census(tmp_path / "c.csv", census))
    assert set(back) == {"10", "3"}
    np.testing.assert_allclose(back["10"], [0.25, 0.75])
    (tmp_path / "bad.csv").write_text("zone_id,segment_0,segment_1\nz,0.5,0.6\n")
    with pytest.raises(DataError, match="sum to 1"):
        read_census(tmp_path / "bad.csv")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write_text(tmp_path / "x.txt", "hello\n")
    atomic_write_text(tmp_path / "x.txt", "again\n")
    assert os.listdir(tmp_path) == ["x.txt"]
    assert (tmp_path / "x.txt").read_text() == "again\n"
