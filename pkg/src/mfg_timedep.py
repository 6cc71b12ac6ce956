"""
Fully discrete time-dependent MFG on a torus grid.

A state holds the interior densities M_1..M_NT and values U_0..U_{NT-1}; the
endpoint slices M_0 and U_NT come from the problem and are never modified.
For k = 1..NT the residual blocks are
    r_k = (U_k - U_{k-1})/dt + nu Lap U_{k-1} - g([D U_{k-1}], M_k) + f(M_k) + sign V
    s_k = (M_k - M_{k-1})/dt - nu Lap M_k + B(U_{k-1}, M_k)
and r_k pairs with M_k, s_k with U_{k-1}.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from exceptions import ConfigError, DomainError, GridError
from hrf import ConvergenceTrace, FlowConfig, FlowSystem, integrate_flow, solve_sparse
from mfg_models import MfgProblem, divergence_of_flux
from mfg_stationary import NewtonConfig, stationary_linearization

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "s", "ds", "res_inf", "min_density", "mass_dev", "bregman")
DEFAULT_TOL = 1e-8


@dataclass
class SpaceTimeState:
    """
    Interior unknowns of a time-dependent problem.

    Args:
        problem (MfgProblem): Carries the grid, dt and the frozen endpoint slices
        M (np.ndarray): Densities M_1..M_NT, shape (NT, node_count)
        U (np.ndarray): Values U_0..U_{NT-1}, shape (NT, node_count)
    """

    problem: MfgProblem
    M: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        if not self.problem.is_time_dependent:
            raise ConfigError(f"problem {self.problem.name!r} is stationary")
        shape = (self.problem.n_time, self.problem.grid.node_count)
        self.M = np.asarray(self.M, dtype=float).reshape(shape)
        self.U = np.asarray(self.U, dtype=float).reshape(shape)

    @classmethod
    def initial(cls, problem: MfgProblem) -> "SpaceTimeState":
        """M_k = M_0 and U_k = U_NT for every interior slice."""
        n_time = problem.n_time
        return cls(problem, np.tile(problem.initial_density, (n_time, 1)),
                   np.tile(problem.terminal_value, (n_time, 1)))

    @classmethod
    def from_stacked(cls, problem: MfgProblem, x: np.ndarray) -> "SpaceTimeState":
        """Inverse of ``stacked``: x = (M_1..M_NT, U_0..U_{NT-1}) flattened."""
        half = problem.n_time * problem.grid.node_count
        x = np.asarray(x, dtype=float)
        if x.shape != (2 * half,):
            raise GridError(f"stacked state must have {2 * half} entries, got shape {x.shape}")
        return cls(problem, x[:half].copy(), x[half:].copy())

    @property
    def dt(self) -> float:
        return self.problem.time_step

    def full_density(self) -> np.ndarray:
        """M_0..M_NT, shape (NT + 1, node_count)."""
        return np.vstack([self.problem.initial_density, self.M])

    def full_value(self) -> np.ndarray:
        """U_0..U_NT, shape (NT + 1, node_count)."""
        return np.vstack([self.U, self.problem.terminal_value])

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.M.ravel(), self.U.ravel()])

    def slice_masses(self) -> np.ndarray:
        return self.problem.grid.cell_volume * np.sum(self.M, axis=1)

    def copy(self) -> "SpaceTimeState":
        return SpaceTimeState(self.problem, self.M.copy(), self.U.copy())


@dataclass
class SpaceTimeResidual:
    r: np.ndarray
    s: np.ndarray

    def sup_norm(self) -> float:
        return float(max(np.max(np.abs(self.r)), np.max(np.abs(self.s))))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.r.ravel(), self.s.ravel()])

    def as_direction(self, problem: MfgProblem) -> SpaceTimeState:
        """The residual as a state-shaped vector: r_k on M_k, s_k on U_{k-1}."""
        return SpaceTimeState(problem, self.r, self.s)


def _slice_terms(problem: MfgProblem, M: np.ndarray, U: np.ndarray):
    """Raw blocks for stacked interior arrays M, U of shape (NT, N)."""
    grid = problem.grid
    dt = problem.time_step
    M_full = np.vstack([problem.initial_density, M])
    U_full = np.vstack([U, problem.terminal_value])
    V = problem.cost_sign * problem.potential
    r = np.empty_like(M)
    s = np.empty_like(M)
    for k in range(1, problem.n_time + 1):
        U_prev, M_k = U_full[k - 1], M_full[k]
        q, g, alpha = problem.hamiltonian_terms(U_prev, M_k)
        r[k - 1] = ((U_full[k] - U_prev) / dt + problem.viscosity * grid.laplacian(U_prev) - g
                    + problem.coupling.apply(M_k, grid) + V)
        s[k - 1] = ((M_k - M_full[k - 1]) / dt - problem.viscosity * grid.laplacian(M_k)
                    + divergence_of_flux(alpha, M_k, grid))
    return r, s


def residual_td(Y: SpaceTimeState) -> SpaceTimeResidual:
    r, s = _slice_terms(Y.problem, Y.M, Y.U)
    return SpaceTimeResidual(r, s)


def spacetime_pairing(xi: SpaceTimeState, psi: SpaceTimeState) -> float:
    """dt * sum_k <xi_M_k, psi_M_k>_h + dt * sum_k <xi_U_k, psi_U_k>_h."""
    if xi.M.shape != psi.M.shape or xi.U.shape != psi.U.shape:
        raise GridError(f"cannot pair states of shapes {xi.M.shape} and {psi.M.shape}")
    weight = xi.dt * xi.problem.grid.cell_volume
    return float(weight * (np.sum(xi.M * psi.M) + np.sum(xi.U * psi.U)))


def _difference(Y: SpaceTimeState, Z: SpaceTimeState) -> SpaceTimeState:
    return SpaceTimeState(Y.problem, Y.M - Z.M, Y.U - Z.U)


def monotonicity_gap(Y: SpaceTimeState, Y_other: SpaceTimeState) -> float:
    """<F(Y) - F(Y_other), Y - Y_other>_{h,dt}; positive whenever the states differ."""
    F = residual_td(Y)
    F_other = residual_td(Y_other)
    diff_F = SpaceTimeResidual(F.r - F_other.r, F.s - F_other.s).as_direction(Y.problem)
    return spacetime_pairing(diff_F, _difference(Y, Y_other))


def slice_means(M: np.ndarray, r: np.ndarray) -> np.ndarray:
    """rbar_k = <M_k, r_k>_h / <M_k, 1>_h."""
    return np.sum(M * r, axis=1) / np.sum(M, axis=1)


def hrf_rhs(Y: SpaceTimeState) -> SpaceTimeState:
    """Flow direction: dM_k = -M_k (r_k - rbar_k), dU_{k-1} = -s_k."""
    F = residual_td(Y)
    rbar = slice_means(Y.M, F.r)
    return SpaceTimeState(Y.problem, -Y.M * (F.r - rbar[:, None]), -F.s)


def _check_positive(M: np.ndarray) -> None:
    if np.any(M <= 0.0):
        node = int(np.flatnonzero(M.ravel() <= 0.0)[0])
        raise DomainError(f"entropy needs positive densities (flat index {node})", node)


def entropy(Y: SpaceTimeState) -> float:
    """dt sum_k <M_k, log M_k - 1>_h + dt/2 sum_k <U_k, U_k>_h."""
    _check_positive(Y.M)
    weight = Y.dt * Y.problem.grid.cell_volume
    return float(weight * (np.sum(Y.M * (np.log(Y.M) - 1.0)) + 0.5 * np.sum(Y.U * Y.U)))


def entropy_gradient(Y: SpaceTimeState) -> SpaceTimeState:
    _check_positive(Y.M)
    return SpaceTimeState(Y.problem, np.log(Y.M), Y.U.copy())


def bregman(Y_star: SpaceTimeState, Y: SpaceTimeState) -> float:
    """D_E(Y*, Y) = E(Y*) - E(Y) - <grad E(Y), Y* - Y>."""
    return entropy(Y_star) - entropy(Y) - spacetime_pairing(entropy_gradient(Y), _difference(Y_star, Y))


def timedep_blocks_jacobian(problem: MfgProblem, M: np.ndarray, U: np.ndarray):
    """
    Sparse (dr/dM, dr/dU, ds/dM, ds/dU) for stacked interior arrays.

    Unknown blocks are ordered M_1..M_NT and U_0..U_{NT-1}; rows r_1..r_NT
    and s_1..s_NT.
    """
    n_time = problem.n_time
    n = problem.grid.node_count
    dt = problem.time_step
    U_full = np.vstack([U, problem.terminal_value])
    r_M, r_U, s_M, s_U = [], [], [], []
    for k in range(1, n_time + 1):
        core_M, core_U, fp_M, fp_U = stationary_linearization(problem, M[k - 1], U_full[k - 1])
        r_M.append(core_M)
        r_U.append(core_U)
        s_M.append(fp_M)
        s_U.append(fp_U)
    step = sp.identity(n, format="csr") / dt
    later = sp.kron(sp.eye(n_time, k=1), step)
    earlier = sp.kron(sp.eye(n_time, k=-1), step)
    eye = sp.kron(sp.identity(n_time), step)
    return (sp.block_diag(r_M, format="csr"),
            sp.csr_matrix(sp.block_diag(r_U) - eye + later),
            sp.csr_matrix(sp.block_diag(s_M) + eye - earlier),
            sp.block_diag(s_U, format="csr"))


def timedep_jacobian(Y: SpaceTimeState) -> sp.csc_matrix:
    """Square Jacobian of the stacked residual (r; s) in the stacked state (M; U)."""
    r_M, r_U, s_M, s_U = timedep_blocks_jacobian(Y.problem, Y.M, Y.U)
    return sp.bmat([[r_M, r_U], [s_M, s_U]], format="csc")


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

class TimeDepFlowSystem(FlowSystem):
    trace_columns = TRACE_COLUMNS
    residual_column = "res_inf"

    def __init__(self, problem: MfgProblem, reference: Optional[SpaceTimeState] = None):
        self.problem = problem
        self.grid = problem.grid
        self.n_slices = problem.n_time
        self.reference = reference
        self._shape = (problem.n_time, problem.grid.node_count)

    def blocks(self, M, U):
        r, s = _slice_terms(self.problem, M.reshape(self._shape), U.reshape(self._shape))
        return r.ravel(), s.ravel()

    def block_jacobian(self, M, U):
        return timedep_blocks_jacobian(self.problem, M.reshape(self._shape), U.reshape(self._shape))

    def residual_norm(self, M, U):
        r, s = self.blocks(M, U)
        return float(max(np.max(np.abs(r)), np.max(np.abs(s))))

    def trace_row(self, step, s, ds, M, U, residual) -> Dict[str, float]:
        Y = SpaceTimeState(self.problem, M, U)
        row = {"step": step, "s": s, "ds": ds, "res_inf": residual,
               "min_density": float(np.min(M)),
               "mass_dev": float(np.max(np.abs(Y.slice_masses() - 1.0)))}
        if self.reference is not None:
            row["bregman"] = bregman(self.reference, Y)
        return row


def _check_timedep(problem: MfgProblem) -> None:
    if not problem.is_time_dependent:
        raise ConfigError(f"problem {problem.name!r} is stationary")


def hrf_timedep_solve(problem: MfgProblem, init: Optional[SpaceTimeState] = None,
                      flow_cfg: Optional[FlowConfig] = None,
                      reference: Optional[SpaceTimeState] = None) -> Tuple[SpaceTimeState, ConvergenceTrace]:
    """
    Integrate the entropy flow on the space-time unknowns until the residual
    sup norm drops below the flow tolerance.

    Args:
        problem (MfgProblem): Time-dependent problem
        init (SpaceTimeState): Feasible start; ``SpaceTimeState.initial`` if omitted
        flow_cfg (FlowConfig): Step policy, tolerance 1e-8 unless given
        reference (SpaceTimeState): Known root; the trace then records D_E(root, Y(s))

    Returns:
        Tuple[SpaceTimeState, ConvergenceTrace]
    """
    _check_timedep(problem)
    init = init or SpaceTimeState.initial(problem)
    flow_cfg = flow_cfg or FlowConfig(tol=DEFAULT_TOL)
    system = TimeDepFlowSystem(problem, reference)
    M, U, trace = integrate_flow(system, init.M.ravel(), init.U.ravel(), flow_cfg)
    return SpaceTimeState(problem, M, U), trace


def newton_timedep_solve(problem: MfgProblem, init: Optional[SpaceTimeState] = None,
                         cfg: Optional[NewtonConfig] = None) -> Tuple[SpaceTimeState, ConvergenceTrace]:
    """Damped Newton on F(Y) = 0 with backtracking that keeps every density slice positive."""
    _check_timedep(problem)
    cfg = cfg or NewtonConfig(tol=DEFAULT_TOL)
    Y = (init or SpaceTimeState.initial(problem)).copy()
    system = TimeDepFlowSystem(problem)
    trace = ConvergenceTrace(TRACE_COLUMNS, residual_column="res_inf")
    F = residual_td(Y)
    res = F.sup_norm()
    trace.append(system.trace_row(0, 0.0, 0.0, Y.M.ravel(), Y.U.ravel(), res))
    n_unknowns = Y.M.size
    for it in range(1, cfg.max_iter + 1):
        if res < cfg.tol:
            break
        delta = solve_sparse(timedep_jacobian(Y), -F.stacked())
        dM = delta[:n_unknowns].reshape(Y.M.shape)
        dU = delta[n_unknowns:].reshape(Y.U.shape)
        t = 1.0
        while t >= cfg.min_damping:
            trial = SpaceTimeState(problem, Y.M + t * dM, Y.U + t * dU)
            if np.min(trial.M) > 0.0:
                try:
                    F_trial = residual_td(trial)
                except DomainError:
                    F_trial = None
                if F_trial is not None and F_trial.sup_norm() < (1.0 - 1e-4 * t) * res:
                    break
            t *= 0.5
        else:
            trace.message = "line search failed"
            logger.warning("Newton line search failed at iteration %d, residual %.3e", it, res)
            break
        Y, F = trial, F_trial
        res = F.sup_norm()
        trace.append(system.trace_row(it, float("nan"), t, Y.M.ravel(), Y.U.ravel(), res))
        logger.debug("space-time Newton iteration %d: damping %.3g residual %.3e", it, t, res)
    trace.converged = res < cfg.tol
    if trace.converged:
        logger.info("space-time Newton converged in %d iterations, residual %.3e", trace.n_steps, res)
    else:
        trace.message = trace.message or "iteration cap reached"
        logger.warning("space-time Newton stopped with residual %.3e (%s)", res, trace.message)
    return Y, trace


def solve_timedep(problem: MfgProblem, solver: str = "hrf", init: Optional[SpaceTimeState] = None,
                  tol: Optional[float] = None) -> Tuple[SpaceTimeState, ConvergenceTrace]:
    """Dispatch by name; policy iteration falls back to Newton for space-time problems."""
    tol = DEFAULT_TOL if tol is None else tol
    if solver == "hrf":
        return hrf_timedep_solve(problem, init, FlowConfig(tol=tol))
    if solver in ("newton", "policy"):
        if solver == "policy":
            logger.warning("policy iteration is stationary only, using Newton")
        return newton_timedep_solve(problem, init, NewtonConfig(tol=tol))
    raise ConfigError(f"unknown space-time solver {solver!r}")
