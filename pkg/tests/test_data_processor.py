import numpy as np
import pandas as pd
import pytest

from data_processor import RUN_COLUMNS, consolidate_runs, error_spread, field_errors, l2_error, sweep_table
from exceptions import GridError


def naive_l2(u, v, h):
    total = 0.0
    for a, b in zip(np.ravel(u), np.ravel(v)):
        total += (a - b) ** 2
    return np.sqrt(np.prod(h) * total)


def test_constant_difference_on_unit_square():
    u = np.full((10, 10), 3.0)
    v = np.full((10, 10), 1.0)
    assert l2_error(u, v, (0.1, 0.1)) == pytest.approx(2.0, rel=1e-14)


def test_l2_error_matches_loop(rng):
    for shape, h in [((12,), (1 / 12,)), ((5, 5), (0.2, 0.2)), ((4, 6), (1 / 6, 0.25))]:
        u = rng.normal(size=shape)
        v = rng.normal(size=shape)
        assert l2_error(u, v, h) == pytest.approx(naive_l2(u, v, h), rel=1e-13)
    assert l2_error(u, u, h) == 0.0


def test_scalar_spacing_and_shape_mismatch():
    assert l2_error(np.ones(4), np.zeros(4), 0.25) == pytest.approx(1.0)
    with pytest.raises(GridError):
        l2_error(np.ones(4), np.ones(5), 0.25)


def test_field_errors():
    reference = {"m": np.ones(4), "u": np.zeros(4), "V": np.zeros(4), "lambda": 1.5}
    recovered = {"m": np.full(4, 2.0), "u": np.zeros(4), "V": np.ones(4), "lambda": 1.25}
    spacings = {name: (0.25,) for name in ("m", "u", "V")}
    errors = field_errors(recovered, reference, spacings)
    assert errors == pytest.approx({"m_error": 1.0, "u_error": 0.0, "V_error": 1.0, "lambda_error": 0.25})
    reference["lambda"] = None
    assert "lambda_error" not in field_errors(recovered, reference, spacings)


def test_consolidate_runs_orders_by_solver_and_method():
    runs = [
        {"solver": "policy", "method": "gn", "m_error": 3e-3},
        {"solver": "hrf", "method": "gn", "m_error": 1e-3, "extra": 1},
        {"solver": "hrf", "method": "gd", "m_error": 2e-3},
    ]
    table = consolidate_runs(runs)
    assert list(table.columns) == RUN_COLUMNS
    assert list(zip(table["solver"], table["method"])) == [("hrf", "gd"), ("hrf", "gn"), ("policy", "gn")]
    assert table["u_error"].isna().all()
    assert error_spread(table) == pytest.approx(3.0)


def test_empty_inputs():
    assert list(consolidate_runs([]).columns) == RUN_COLUMNS
    assert error_spread(pd.DataFrame({"m_error": [0.0, 1.0]})) is None
    assert sweep_table([]).empty


def test_sweep_table_sorted_by_observation_count():
    table = sweep_table([{"m_obs": 40, "m_error": 1e-3}, {"m_obs": 10, "m_error": 5e-3}])
    assert table["m_obs"].tolist() == [10, 40]
