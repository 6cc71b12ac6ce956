import numpy as np
import pandas as pd
import pytest

from data_loader import (load_run_fields, read_field, read_json, read_observations, read_summary, read_table,
                         scan_runs, write_field, write_json, write_observations, write_table)
from exceptions import GridError
from rkhs import ObservationSet
from torus_grid import TorusGrid


def test_stationary_2d_field_layout(tmp_path, grid_2d, rng):
    values = rng.normal(size=grid_2d.node_count)
    path = str(tmp_path / "fields" / "u.csv")
    write_field(path, "u", values, grid_2d)
    lines = open(path).read().splitlines()
    assert lines[0] == "# field=u dim=2 n_per_axis=6 n_time=0 horizon=0.0"
    assert len(lines) == 7
    back, info = read_field(path)
    np.testing.assert_array_equal(back, values)
    assert info == {"field": "u", "dim": 2, "n_per_axis": 6, "n_time": 0, "horizon": 0.0}


def test_stationary_1d_field_is_one_row(tmp_path, grid_1d):
    path = str(tmp_path / "m.csv")
    write_field(path, "m", np.arange(8.0), grid_1d)
    assert len(open(path).read().splitlines()) == 2
    np.testing.assert_array_equal(read_field(path)[0], np.arange(8.0))


def test_space_time_field_has_one_row_per_slice(tmp_path, grid_1d, rng):
    values = rng.normal(size=(5, 8)) * 1e-7 + 1.0 / 3.0
    path = str(tmp_path / "m.csv")
    write_field(path, "m", values, grid_1d, n_time=4, horizon=1.0)
    back, info = read_field(path)
    assert back.shape == (5, 8)
    np.testing.assert_array_equal(back, values)
    assert info["n_time"] == 4 and info["horizon"] == 1.0


@pytest.mark.parametrize("text", [
    "1.0,2.0\n",
    "# field=m dim=1\n1.0\n",
    "# field=m dim=1 n_per_axis=4 n_time=0 horizon=0.0\n1.0,2.0,3.0\n",
    "# field=m dim=1 n_per_axis=2 n_time=2 horizon=1.0\n1.0,2.0\n3.0,4.0\n",
])
def test_malformed_field_files(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(GridError):
        read_field(str(path))


def test_tables_and_observations(tmp_path):
    frame = pd.DataFrame({"step": [0, 1], "res_inf": [0.1, 1e-9 / 3]})
    write_table(frame, str(tmp_path / "trace.csv"))
    pd.testing.assert_frame_equal(read_table(str(tmp_path / "trace.csv")), frame)
    obs = ObservationSet("V", np.array([[0.1, 0.2], [0.7, 0.3]]), [1.0 / 3.0, -2.0], sigma=1e-3)
    write_observations(obs, str(tmp_path / "obs" / "v_obs.csv"))
    back = read_observations(str(tmp_path / "obs" / "v_obs.csv"), "V")
    np.testing.assert_array_equal(back.values, obs.values)
    np.testing.assert_array_equal(back.targets, obs.targets)


def test_json_handles_numpy_values(tmp_path):
    path = str(tmp_path / "summary.json")
    write_json({"lambda": np.float64(1.5), "counts": np.arange(3), "converged": np.bool_(True)}, path)
    assert read_json(path) == {"lambda": 1.5, "counts": [0, 1, 2], "converged": True}
    with pytest.raises(TypeError):
        write_json({"bad": object()}, str(tmp_path / "bad.json"))


def test_run_directory_helpers(tmp_path):
    grid = TorusGrid(1, 4)
    run_dir = tmp_path / "hrf-gn"
    write_field(str(run_dir / "m.csv"), "m", np.ones(4), grid)
    write_json({"label": "hrf-gn"}, str(run_dir / "summary.json"))
    (tmp_path / "reference").mkdir()
    fields = load_run_fields(str(run_dir))
    assert set(fields) == {"m"}
    assert scan_runs(str(tmp_path)) == {"hrf-gn": str(run_dir)}
    assert scan_runs(str(tmp_path / "missing")) == {}
    assert read_summary(str(run_dir)) == {"label": "hrf-gn"}
    assert read_summary(str(tmp_path / "reference")) is None
