"""
Entropy (Hessian-Riemannian) flow integrator shared by the stationary and the
time-dependent solvers.

A flow system exposes HJB blocks r (paired with densities) and FP blocks s
(paired with values) over ``n_slices`` density/value slices. The flow moves
densities multiplicatively, dM/ds = -M * (r - rbar) slice by slice, and values
by dU/ds = -s. Implicit steps are solved in entropy coordinates
(log M, U, mu), with one scalar mu per slice pinning the slice mass at one.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from exceptions import ConfigError, ConvergenceError, DomainError
from torus_grid import TorusGrid

logger = logging.getLogger(__name__)

TIKHONOV_SHIFT = 1e-10


@dataclass(frozen=True)
class FlowConfig:
    """
    Step-size policy and stopping rule of the flow.

    Args:
        tol (float): Stop once the residual sup norm drops below this
        max_steps (int): Budget of accepted steps
        initial_step (float): First step size
        growth (float): Factor applied to the step after a success
        shrink (float): Factor applied after a failed step
        min_step (float): Step floor; going below it is an error
        max_step (float): Step cap
        newton_iters (int): Damped Newton iterations per implicit step
        scheme (str): "implicit" or "explicit"
    """

    tol: float = 1e-9
    max_steps: int = 2000
    initial_step: float = 0.5
    growth: float = 1.2
    shrink: float = 0.5
    min_step: float = 1e-8
    max_step: float = 1e6
    newton_iters: int = 5
    scheme: str = "implicit"

    def __post_init__(self):
        if self.scheme not in ("implicit", "explicit"):
            raise ConfigError(f"unknown flow scheme {self.scheme!r}")


@dataclass
class ConvergenceTrace:
    """Append-only per-step record of a solve."""

    columns: Tuple[str, ...]
    residual_column: str = "residual_norm"
    rows: List[Dict[str, float]] = field(default_factory=list)
    converged: bool = False
    message: str = ""

    def append(self, row: Dict[str, float]) -> None:
        self.rows.append({col: row.get(col, float("nan")) for col in self.columns})

    @property
    def n_steps(self) -> int:
        return int(self.rows[-1]["step"]) if self.rows else 0

    @property
    def final_residual(self) -> float:
        return float(self.rows[-1][self.residual_column]) if self.rows else float("nan")

    def residuals(self) -> np.ndarray:
        return np.array([row[self.residual_column] for row in self.rows])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.columns))


class FlowSystem(ABC):
    """Residual blocks and their Jacobians as seen by the flow integrator."""

    grid: TorusGrid
    n_slices: int
    trace_columns: Tuple[str, ...]
    residual_column: str

    @abstractmethod
    def blocks(self, M: np.ndarray, U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked HJB blocks r and FP blocks s."""

    @abstractmethod
    def block_jacobian(self, M: np.ndarray, U: np.ndarray):
        """Sparse (dr/dM, dr/dU, ds/dM, ds/dU)."""

    @abstractmethod
    def residual_norm(self, M: np.ndarray, U: np.ndarray) -> float:
        ...

    @abstractmethod
    def trace_row(self, step: int, s: float, ds: float, M: np.ndarray, U: np.ndarray,
                  residual: float) -> Dict[str, float]:
        ...

    def project(self, M: np.ndarray, U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Renormalize each density slice to unit mass."""
        return normalize_slices(M, self.grid, self.n_slices), U

    def slice_means(self, M: np.ndarray, r: np.ndarray) -> np.ndarray:
        """rbar_k = <M_k, r_k>_h / <M_k, 1>_h for every slice."""
        n = self.grid.node_count
        Mk = M.reshape(self.n_slices, n)
        return np.sum(Mk * r.reshape(self.n_slices, n), axis=1) / np.sum(Mk, axis=1)

    def flow_direction(self, M: np.ndarray, U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        r, s = self.blocks(M, U)
        rbar = np.repeat(self.slice_means(M, r), self.grid.node_count)
        return -M * (r - rbar), -s


def normalize_slices(M: np.ndarray, grid: TorusGrid, n_slices: int) -> np.ndarray:
    Mk = M.reshape(n_slices, grid.node_count)
    masses = grid.cell_volume * np.sum(Mk, axis=1)
    return (Mk / masses[:, None]).ravel()


def solve_sparse(matrix: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Sparse LU solve, retried once with a Tikhonov shift when the matrix is singular."""
    try:
        out = splu(sp.csc_matrix(matrix)).solve(rhs)
        reason = "non-finite solution"
        if np.all(np.isfinite(out)):
            return out
    except RuntimeError as e:
        reason = str(e)
    logger.warning("singular system of size %d (%s), retrying with Tikhonov shift %.0e",
                   matrix.shape[0], reason, TIKHONOV_SHIFT)
    shifted = sp.csc_matrix(matrix + TIKHONOV_SHIFT * sp.identity(matrix.shape[0]))
    return splu(shifted).solve(rhs)


class _EntropyStep:
    """Implicit Euler step of the flow in (log M, U, mu) coordinates."""

    def __init__(self, system: FlowSystem, M: np.ndarray, U: np.ndarray, ds: float):
        self.system = system
        self.ds = ds
        self.n = system.grid.node_count
        self.k = system.n_slices
        self.log_prev = np.log(M)
        self.U_prev = U
        r, _ = system.blocks(M, U)
        self.start = np.concatenate([self.log_prev, U, system.slice_means(M, r)])
        self.slice_of = sp.kron(sp.identity(self.k), np.ones((self.n, 1)), format="csr")

    def split(self, w: np.ndarray):
        kn = self.k * self.n
        return w[:kn], w[kn:2 * kn], w[2 * kn:]

    def residual(self, w: np.ndarray) -> np.ndarray:
        L, U, mu = self.split(w)
        with np.errstate(over="ignore"):
            M = np.exp(L)
        if not np.all(np.isfinite(M)):
            raise FloatingPointError("density overflow in implicit step")
        r, s = self.system.blocks(M, U)
        mass = self.system.grid.cell_volume * np.sum(M.reshape(self.k, self.n), axis=1) - 1.0
        return np.concatenate([
            (L - self.log_prev) / self.ds + r - np.repeat(mu, self.n),
            (U - self.U_prev) / self.ds + s,
            mass,
        ])

    def jacobian(self, w: np.ndarray) -> sp.csc_matrix:
        L, U, _ = self.split(w)
        M = np.exp(L)
        r_M, r_U, s_M, s_U = self.system.block_jacobian(M, U)
        D = sp.diags(M)
        eye = sp.identity(self.k * self.n) / self.ds
        mass_rows = self.system.grid.cell_volume * (self.slice_of.T @ D)
        return sp.bmat([
            [eye + r_M @ D, r_U, -self.slice_of],
            [s_M @ D, eye + s_U, None],
            [mass_rows, None, None],
        ], format="csc")

    def solve(self, newton_iters: int, step_tol: float) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        w = self.start.copy()
        try:
            res = self.residual(w)
        except (DomainError, FloatingPointError):
            return None
        for _ in range(newton_iters):
            res_norm = np.max(np.abs(res))
            if res_norm <= step_tol:
                break
            delta = solve_sparse(self.jacobian(w), -res)
            t = 1.0
            accepted = False
            while t >= 1.0 / 32:
                trial = w + t * delta
                try:
                    trial_res = self.residual(trial)
                except (DomainError, FloatingPointError):
                    t *= 0.5
                    continue
                trial_norm = np.max(np.abs(trial_res))
                if np.isfinite(trial_norm) and trial_norm < (1.0 - 1e-4 * t) * res_norm:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                return None
            w, res = trial, trial_res
            if np.max(np.abs(t * delta)) <= 1e-13 * (1.0 + np.max(np.abs(w))):
                break
        if np.max(np.abs(res)) > 1e3 * step_tol:
            return None
        L, U, _ = self.split(w)
        return np.exp(L), U


def _explicit_step(system: FlowSystem, M: np.ndarray, U: np.ndarray, ds: float, res_norm: float):
    dM, dU = system.flow_direction(M, U)
    M_new = M + ds * dM
    U_new = U + ds * dU
    if np.min(M_new) <= 0.0:
        return None
    try:
        if system.residual_norm(M_new, U_new) > res_norm:
            return None
    except DomainError:
        return None
    return M_new, U_new


def integrate_flow(system: FlowSystem, M: np.ndarray, U: np.ndarray,
                   cfg: FlowConfig) -> Tuple[np.ndarray, np.ndarray, ConvergenceTrace]:
    """
    Integrate the flow from (M, U) until the residual drops below ``cfg.tol``.

    Returns the best state met (lowest residual) and the trace; the trace is
    flagged non-converged when the step budget runs out.

    Raises:
        ConvergenceError: The step size fell below ``cfg.min_step``
    """
    trace = ConvergenceTrace(system.trace_columns, residual_column=system.residual_column)
    M, U = system.project(np.asarray(M, dtype=float), np.asarray(U, dtype=float))
    if np.min(M) <= 0.0:
        raise DomainError("flow must start from a positive density", int(np.argmin(M)))
    res = system.residual_norm(M, U)
    trace.append(system.trace_row(0, 0.0, 0.0, M, U, res))
    best = (res, M, U)
    step_tol = 0.01 * cfg.tol
    ds = cfg.initial_step
    s_total = 0.0
    step = 0
    while res >= cfg.tol and step < cfg.max_steps:
        if cfg.scheme == "implicit":
            new_state = _EntropyStep(system, M, U, ds).solve(cfg.newton_iters, step_tol)
        else:
            new_state = _explicit_step(system, M, U, ds, res)
        if new_state is None or np.min(new_state[0]) <= 0.0:
            ds *= cfg.shrink
            logger.debug("step rejected, ds -> %.3e", ds)
            if ds < cfg.min_step:
                trace.message = "step size fell below floor"
                raise ConvergenceError(f"flow step size fell below {cfg.min_step:g}",
                                       residual=best[0], trace=trace)
            continue
        M, U = system.project(*new_state)
        step += 1
        s_total += ds
        res = system.residual_norm(M, U)
        trace.append(system.trace_row(step, s_total, ds, M, U, res))
        logger.debug("flow step %d: ds=%.3e residual=%.3e", step, ds, res)
        if res < best[0]:
            best = (res, M, U)
        ds = min(ds * cfg.growth, cfg.max_step)
    trace.converged = res < cfg.tol
    if trace.converged:
        logger.info("flow converged in %d steps, residual %.3e", step, res)
        return M, U, trace
    trace.message = "step budget exhausted"
    logger.warning("flow stopped after %d steps with residual %.3e", step, best[0])
    return best[1], best[2], trace
