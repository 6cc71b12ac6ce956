"""
Reading and writing experiment artifacts: field matrices, traces, observation
tables and JSON summaries.
"""
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from exceptions import GridError
from rkhs import ObservationSet
from torus_grid import TorusGrid

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
HEADER_KEYS = ("field", "dim", "n_per_axis", "n_time", "horizon")


def _field_matrix(values: np.ndarray, grid: TorusGrid, n_time: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if n_time:
        return values.reshape(n_time + 1, grid.node_count)
    if grid.dim == 1:
        return values.reshape(1, grid.node_count)
    return values.reshape(grid.shape)


def write_field(path: str, name: str, values: np.ndarray, grid: TorusGrid,
                n_time: int = 0, horizon: float = 0.0) -> None:
    """
    Write one field as a CSV matrix under a metadata comment line.

    Rows are the first grid index of a 2D stationary field, or the time
    slices 0..N_T of a space-time field; a 1D stationary field is one row.
    """
    matrix = _field_matrix(values, grid, n_time)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# field={name} dim={grid.dim} n_per_axis={grid.n_per_axis} "
                     f"n_time={n_time} horizon={horizon!r}\n")
        pd.DataFrame(matrix).to_csv(handle, index=False, header=False, float_format=FLOAT_FORMAT)


def _parse_header(line: str, path: str) -> Dict[str, str]:
    if not line.startswith("#"):
        raise GridError(f"{path}: missing field header line")
    meta = dict(item.split("=", 1) for item in line[1:].split())
    missing = [k for k in HEADER_KEYS if k not in meta]
    if missing:
        raise GridError(f"{path}: header lacks {', '.join(missing)}")
    return meta


def read_field(path: str) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Read a field written by write_field.

    Returns:
        Tuple[np.ndarray, Dict]: Values (flat for stationary fields, one row per
            slice for space-time fields) and the header metadata
    """
    with open(path, encoding="utf-8") as handle:
        meta = _parse_header(handle.readline().strip(), path)
        frame = pd.read_csv(handle, header=None, float_precision="round_trip")
    info = {"field": meta["field"], "dim": int(meta["dim"]), "n_per_axis": int(meta["n_per_axis"]),
            "n_time": int(meta["n_time"]), "horizon": float(meta["horizon"])}
    matrix = frame.to_numpy(dtype=float)
    node_count = info["n_per_axis"] ** info["dim"]
    if info["n_time"]:
        if matrix.shape != (info["n_time"] + 1, node_count):
            raise GridError(f"{path}: expected {info['n_time'] + 1} x {node_count} values, got {matrix.shape}")
        return matrix, info
    if matrix.size != node_count:
        raise GridError(f"{path}: expected {node_count} values, got {matrix.size}")
    return matrix.ravel(), info


def write_table(frame: pd.DataFrame, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_observations(obs: ObservationSet, path: str) -> None:
    write_table(obs.to_frame(), path)


def read_observations(path: str, field: str) -> ObservationSet:
    return ObservationSet.from_frame(read_table(path), field)


def _to_builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(payload: Dict[str, Any], path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=_to_builtin)
        handle.write("\n")


def read_json(path: str) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def load_run_fields(run_dir: str, names=("m", "u", "V")) -> Dict[str, np.ndarray]:
    """Every field CSV of a run directory that exists, keyed by field name."""
    fields = {}
    for name in names:
        path = os.path.join(run_dir, f"{name}.csv")
        if os.path.exists(path):
            fields[name], _ = read_field(path)
        else:
            logger.debug("No %s field in %s", name, run_dir)
    return fields


def scan_runs(out_dir: str) -> Dict[str, str]:
    """Map run label to directory for every run directory holding a summary.json."""
    runs = {}
    if not os.path.isdir(out_dir):
        return runs
    for entry in sorted(os.listdir(out_dir)):
        run_dir = os.path.join(out_dir, entry)
        if os.path.isfile(os.path.join(run_dir, "summary.json")):
            runs[entry] = run_dir
    return runs


def read_summary(run_dir: str) -> Optional[Dict[str, Any]]:
    path = os.path.join(run_dir, "summary.json")
    if not os.path.exists(path):
        logger.warning("No summary.json in %s", run_dir)
        return None
    return read_json(path)
