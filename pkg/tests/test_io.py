import numpy as np
import pandas as pd
import pytest

from lkis._utils import ParseError, TimeSeries
from lkis.dynamics import SystemSpec, simulate
from lkis.harness.io import load_series, read_metadata, write_frame, write_json, write_series, write_trajectory


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_plain_three_line_file(tmp_path):
    series = load_series(_write(tmp_path, "# dt: 0.1\n1,2\n3,4\n5,6\n"))
    assert isinstance(series, TimeSeries)
    assert series.dt == 0.1
    np.testing.assert_array_equal(series.values, [[1, 2], [3, 4], [5, 6]])


def test_header_and_time_column(tmp_path):
    series = load_series(_write(tmp_path, "# dt: 0.5\nt,x1\n0.0,1.25\n0.5,2.5\n"))
    np.testing.assert_array_equal(series.values, [[1.25], [2.5]])


def test_episode_column(tmp_path):
    episodes = load_series(_write(tmp_path, "# dt: 1\nepisode,x1\n0,1.5\n0,2.5\n1,3.5\n"))
    assert [len(e) for e in episodes] == [2, 1]
    np.testing.assert_array_equal(episodes[1].values, [[3.5]])


def test_blank_line_splits_episodes(tmp_path):
    episodes = load_series(_write(tmp_path, "# dt: 1\nx1\n1\n2\n\n3\n4\n"))
    assert len(episodes) == 2
    np.testing.assert_array_equal(episodes[0].values[:, 0], [1, 2])
    np.testing.assert_array_equal(episodes[1].values[:, 0], [3, 4])


def test_trailing_blank_lines_do_not_split(tmp_path):
    series = load_series(_write(tmp_path, "# dt: 1\n1\n2\n\n\n"))
    assert isinstance(series, TimeSeries) and len(series) == 2


def test_missing_dt(tmp_path):
    path = _write(tmp_path, "1,2\n3,4\n")
    with pytest.raises(ParseError):
        load_series(path)
    assert load_series(path, dt=0.25).dt == 0.25


def test_dt_argument_overrides_metadata(tmp_path):
    assert load_series(_write(tmp_path, "# dt: 1\n1\n2\n"), dt=0.2).dt == 0.2


def test_ragged_row_reports_line(tmp_path):
    with pytest.raises(ParseError) as info:
        load_series(_write(tmp_path, "# dt: 1\nx1,x2\n1,2\n3\n"))
    assert info.value.line == 4


def test_non_numeric_cell_reports_line(tmp_path):
    with pytest.raises(ParseError) as info:
        load_series(_write(tmp_path, "# dt: 1\n1,2\n3,abc\n"))
    assert info.value.line == 3
    assert "abc" in str(info.value)


def test_header_without_samples(tmp_path):
    with pytest.raises(ParseError):
        load_series(_write(tmp_path, "# dt: 1\nx1,x2\n"))


def test_bad_metadata(tmp_path):
    with pytest.raises(ParseError):
        load_series(_write(tmp_path, "# dt: [1\n1\n"))
    with pytest.raises(ParseError):
        load_series(_write(tmp_path, "# just words\n1\n"))


def test_trajectory_round_trip_is_exact(tmp_path):
    traj = simulate(SystemSpec.default("lorenz", observed=(0, 2)), [1.0, 1.0, 1.0], 40, seed=2, noise_sigma=0.3)
    path = write_trajectory(tmp_path / "traj.csv", traj)
    series = load_series(path)
    assert series.dt == traj.dt
    assert np.array_equal(series.values, traj.observations)
    meta = read_metadata(path)
    assert meta["spec"]["kind"] == "lorenz" and meta["seed"] == 2 and meta["noise_sigma"] == 0.3


def test_episode_round_trip(tmp_path, rng):
    episodes = [TimeSeries(rng.normal(size=(5, 2)), 0.5), TimeSeries(rng.normal(size=(3, 2)), 0.5)]
    back = load_series(write_series(tmp_path / "eps.csv", episodes))
    assert len(back) == 2
    for a, b in zip(back, episodes):
        assert np.array_equal(a.values, b.values) and a.dt == 0.5


def test_write_frame_metadata_header(tmp_path):
    path = write_frame(tmp_path / "sub" / "f.csv", pd.DataFrame({"a": [1.0]}), {"dt": 0.1, "note": "x"})
    lines = path.read_text().splitlines()
    assert lines[:3] == ["# dt: 0.1", "# note: x", "a"]


def test_write_json_creates_parents(tmp_path):
    path = write_json(tmp_path / "a" / "b.json", {"k": [1, 2]})
    assert path.read_text().startswith("{")
