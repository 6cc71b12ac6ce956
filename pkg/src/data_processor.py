import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from exceptions import GridError

logger = logging.getLogger(__name__)

FIELDS = ("m", "u", "V")
RUN_COLUMNS = ["solver", "method", "m_error", "u_error", "V_error", "lambda", "lambda_error", "benchmark_lambda",
               "outer_iters", "inner_solves", "objective", "converged", "seconds"]


def l2_error(u_grid: np.ndarray, v_grid: np.ndarray, spacings: Union[float, Sequence[float]]) -> float:
    """
    Discrete L2 distance sqrt(prod(h) * sum |u - v|^2).

    Args:
        u_grid (np.ndarray): First field, any shape
        v_grid (np.ndarray): Second field, same shape
        spacings (float or Sequence[float]): Cell sizes whose product weights the sum

    Returns:
        float: The weighted distance
    """
    u = np.asarray(u_grid, dtype=float)
    v = np.asarray(v_grid, dtype=float)
    if u.shape != v.shape:
        raise GridError(f"cannot compare fields of shapes {u.shape} and {v.shape}")
    weight = float(np.prod(np.atleast_1d(np.asarray(spacings, dtype=float))))
    return float(np.sqrt(weight * np.sum((u - v) ** 2)))


def field_errors(recovered: Mapping[str, np.ndarray], reference: Mapping[str, np.ndarray],
                 spacings: Mapping[str, Sequence[float]]) -> Dict[str, float]:
    """l2_error of every field present in both maps, keyed "<field>_error"."""
    errors = {}
    for name in FIELDS:
        if name in recovered and name in reference:
            errors[f"{name}_error"] = l2_error(recovered[name], reference[name], spacings[name])
    lam, lam_ref = recovered.get("lambda"), reference.get("lambda")
    if lam is not None and lam_ref is not None:
        errors["lambda_error"] = abs(float(lam) - float(lam_ref))
    return errors


def consolidate_runs(runs: Iterable[Mapping[str, object]]) -> pd.DataFrame:
    """
    Collect per-run summaries into one (solver x method) table.

    Args:
        runs (Iterable[Mapping]): One mapping per run with keys from RUN_COLUMNS

    Returns:
        pd.DataFrame: One row per run, ordered by solver then method
    """
    rows = [{col: run.get(col) for col in RUN_COLUMNS} for run in runs]
    if not rows:
        return pd.DataFrame(columns=RUN_COLUMNS)
    table = pd.DataFrame(rows, columns=RUN_COLUMNS)
    return table.sort_values(["solver", "method"], kind="stable").reset_index(drop=True)


def error_spread(table: pd.DataFrame, column: str = "m_error") -> Optional[float]:
    """Ratio of the largest to the smallest error in ``column``, None if undefined."""
    values = table[column].dropna().to_numpy(dtype=float)
    if len(values) == 0 or np.min(values) <= 0:
        return None
    return float(np.max(values) / np.min(values))


def sweep_table(results: List[Dict[str, object]]) -> pd.DataFrame:
    """Errors against the number of density observations."""
    table = pd.DataFrame(results)
    if table.empty:
        return table
    return table.sort_values("m_obs").reset_index(drop=True)
