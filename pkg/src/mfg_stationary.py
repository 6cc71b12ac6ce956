"""
Stationary discrete MFG: residual with the ergodic constant eliminated and
three interchangeable inner solvers (entropy flow, damped Newton, policy
iteration).

The residual blocks are
    R^(m) = nu Lap U - g([D U], M) + f(M) + sign V + lambda
    R^(u) = -nu Lap M + B(U, M)
with lambda = -<M, R^(m) - lambda>_h / <M, 1>_h.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from exceptions import ConfigError, DomainError
from hrf import ConvergenceTrace, FlowConfig, FlowSystem, integrate_flow, normalize_slices, solve_sparse
from mfg_models import MfgProblem, divergence_of_flux, transport_matrix
from torus_grid import TorusGrid

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "residual_norm", "lambda", "min_density", "step_size")


@dataclass
class StationaryState:
    M: np.ndarray
    U: np.ndarray
    lam: float = 0.0

    @classmethod
    def uniform(cls, grid: TorusGrid) -> "StationaryState":
        """m = 1, u = 0: the cold start used by every preset."""
        return cls(np.ones(grid.node_count), np.zeros(grid.node_count), 0.0)

    def copy(self) -> "StationaryState":
        return StationaryState(self.M.copy(), self.U.copy(), self.lam)


@dataclass
class StationaryResidual:
    hjb: np.ndarray
    fp: np.ndarray

    def sup_norm(self) -> float:
        return float(max(np.max(np.abs(self.hjb)), np.max(np.abs(self.fp))))


def _check_stationary(problem: MfgProblem) -> None:
    if problem.is_time_dependent:
        raise ConfigError(f"problem {problem.name!r} is time-dependent")


def hjb_core(M: np.ndarray, U: np.ndarray, problem: MfgProblem,
             potential: Optional[np.ndarray] = None) -> np.ndarray:
    """nu Lap U - g([D U], M) + f(M) + sign V, i.e. R^(m) without lambda."""
    grid = problem.grid
    V = problem.potential if potential is None else grid.check_field(potential)
    q = grid.upwind_stencil(U)
    g = problem.hamiltonian.evaluate(q, M)
    return (problem.viscosity * grid.laplacian(U) - g
            + problem.coupling.apply(M, grid) + problem.cost_sign * V)


def fp_block(M: np.ndarray, U: np.ndarray, problem: MfgProblem) -> np.ndarray:
    grid = problem.grid
    _, _, alpha = problem.hamiltonian_terms(U, M)
    return -problem.viscosity * grid.laplacian(M) + divergence_of_flux(alpha, M, grid)


def lambda_eliminate(M: np.ndarray, U: np.ndarray, V_h: np.ndarray, problem: MfgProblem) -> float:
    """
    Ergodic constant from the density-weighted compatibility condition.

    Raises:
        DomainError: The density has zero total mass
    """
    grid = problem.grid
    mass = grid.mean(M)
    if mass == 0.0:
        raise DomainError("cannot eliminate lambda for a density of zero mass")
    return -grid.inner(M, hjb_core(M, U, problem, V_h)) / mass


def stationary_residual(state: StationaryState, problem: MfgProblem) -> StationaryResidual:
    _check_stationary(problem)
    grid = problem.grid
    M = grid.check_field(state.M)
    U = grid.check_field(state.U)
    core = hjb_core(M, U, problem)
    lam = -grid.inner(M, core) / grid.mean(M)
    return StationaryResidual(core + lam, fp_block(M, U, problem))


def residual_norm(M: np.ndarray, U: np.ndarray, problem: MfgProblem) -> float:
    return stationary_residual(StationaryState(M, U), problem).sup_norm()


def stationary_linearization(problem: MfgProblem, M: np.ndarray, U: np.ndarray):
    """
    Sparse derivatives of the stationary blocks.

    Returns:
        Tuple: (d core/dM, d core/dU, dR^(u)/dM, dR^(u)/dU), all csr
    """
    grid = problem.grid
    ham = problem.hamiltonian
    stencils = grid.stencil_matrices()
    lap = grid.laplacian_matrix()
    q, _, alpha = problem.hamiltonian_terms(U, M)
    hess = ham.hessian(q, M)
    nu = problem.viscosity

    core_U = nu * lap
    core_M = problem.coupling.derivative(M, grid)
    fp_M = -nu * lap
    fp_U = sp.csr_matrix((grid.node_count, grid.node_count))
    if ham.depends_on_density:
        core_M = core_M - sp.diags(ham.density_derivative(q, M))
        mixed = ham.mixed_derivative(q, M)
    else:
        mixed = np.zeros_like(alpha)
    for l, S_l in enumerate(stencils):
        core_U = core_U - sp.diags(alpha[:, l]) @ S_l
        fp_M = fp_M + S_l.T @ sp.diags(alpha[:, l] + M * mixed[:, l])
        for k, S_k in enumerate(stencils):
            weights = M * hess[:, l, k]
            if np.any(weights):
                fp_U = fp_U + S_l.T @ sp.diags(weights) @ S_k
    return sp.csr_matrix(core_M), sp.csr_matrix(core_U), sp.csr_matrix(fp_M), sp.csr_matrix(fp_U)


def extended_residual(problem: MfgProblem, M: np.ndarray, U: np.ndarray, lam: float) -> np.ndarray:
    """[R^(m); R^(u) without its last row; <M,1>_h - 1; <U,1>_h] with lambda as an unknown."""
    grid = problem.grid
    return np.concatenate([
        hjb_core(M, U, problem) + lam,
        fp_block(M, U, problem)[:-1],
        [grid.mean(M) - 1.0, grid.mean(U)],
    ])


def extended_jacobian(problem: MfgProblem, M: np.ndarray, U: np.ndarray) -> sp.csc_matrix:
    """Square Jacobian of ``extended_residual`` in z = (M, U, lambda)."""
    grid = problem.grid
    n = grid.node_count
    core_M, core_U, fp_M, fp_U = stationary_linearization(problem, M, U)
    ones = sp.csr_matrix(np.ones((n, 1)))
    mass = sp.csr_matrix(grid.cell_volume * np.ones((1, n)))
    return sp.bmat([
        [core_M, core_U, ones],
        [fp_M[:-1], fp_U[:-1], None],
        [mass, None, None],
        [None, mass, None],
    ], format="csc")


def _project(M: np.ndarray, U: np.ndarray, grid: TorusGrid) -> Tuple[np.ndarray, np.ndarray]:
    return normalize_slices(M, grid, 1), U - grid.mean(U)


def _trace_row(step: int, residual: float, lam: float, M: np.ndarray, step_size: float) -> Dict[str, float]:
    return {"step": step, "residual_norm": residual, "lambda": lam,
            "min_density": float(np.min(M)), "step_size": step_size}


def _finish(problem: MfgProblem, M: np.ndarray, U: np.ndarray) -> StationaryState:
    return StationaryState(M, U, lambda_eliminate(M, U, problem.potential, problem))


# ---------------------------------------------------------------------------
# Entropy flow
# ---------------------------------------------------------------------------

class StationaryFlowSystem(FlowSystem):
    trace_columns = TRACE_COLUMNS
    residual_column = "residual_norm"

    def __init__(self, problem: MfgProblem):
        _check_stationary(problem)
        self.problem = problem
        self.grid = problem.grid
        self.n_slices = 1

    def blocks(self, M, U):
        return hjb_core(M, U, self.problem), fp_block(M, U, self.problem)

    def block_jacobian(self, M, U):
        return stationary_linearization(self.problem, M, U)

    def residual_norm(self, M, U):
        return residual_norm(M, U, self.problem)

    def project(self, M, U):
        return _project(M, U, self.grid)

    def trace_row(self, step, s, ds, M, U, residual):
        lam = lambda_eliminate(M, U, self.problem.potential, self.problem)
        return _trace_row(step, residual, lam, M, ds)


def hrf_stationary_solve(problem: MfgProblem, init: Optional[StationaryState] = None,
                         flow_cfg: Optional[FlowConfig] = None) -> Tuple[StationaryState, ConvergenceTrace]:
    """
    Solve the stationary system by integrating the entropy flow
    dM/ds = -M (R^(m)), dU/ds = -R^(u).

    Args:
        problem (MfgProblem): Stationary problem
        init (StationaryState): Positive starting state; uniform if omitted
        flow_cfg (FlowConfig): Step policy and tolerance

    Returns:
        Tuple[StationaryState, ConvergenceTrace]: Best state and its trace
    """
    init = init or StationaryState.uniform(problem.grid)
    M, U, trace = integrate_flow(StationaryFlowSystem(problem), init.M, init.U, flow_cfg or FlowConfig())
    return _finish(problem, M, U), trace


# ---------------------------------------------------------------------------
# Damped Newton
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NewtonConfig:
    """
    Args:
        tol (float): Target sup norm of the residual
        max_iter (int): Newton iteration cap
        smoothing (float): If set, build the Jacobian from the softplus-smoothed
            Hamiltonian; residuals, the stopping test and lambda always use the
            original scheme
        min_damping (float): Smallest line-search step before giving up

    The Godunov clamps are piecewise linear, so the unsmoothed Jacobian is the
    one-sided derivative of a semismooth map and damped Newton converges on it
    as it stands. Smoothing is therefore off by default and only changes the
    step direction near the kinks.
    """

    tol: float = 1e-9
    max_iter: int = 100
    smoothing: Optional[float] = None
    min_damping: float = 2.0 ** -20


def _smoothed_problem(problem: MfgProblem, smoothing: Optional[float]) -> MfgProblem:
    if smoothing is None:
        return problem
    if not hasattr(problem.hamiltonian, "smoothed"):
        logger.warning("%s has no smoothed variant, using it as is", type(problem.hamiltonian).__name__)
        return problem
    return problem.with_hamiltonian(problem.hamiltonian.smoothed(smoothing))


def newton_stationary_solve(problem: MfgProblem, init: Optional[StationaryState] = None,
                            cfg: Optional[NewtonConfig] = None) -> Tuple[StationaryState, ConvergenceTrace]:
    """
    Damped Newton on the extended system in (M, U, lambda), backtracking on
    the residual sup norm while keeping the density positive.
    """
    _check_stationary(problem)
    cfg = cfg or NewtonConfig()
    jac_problem = _smoothed_problem(problem, cfg.smoothing)
    grid = problem.grid
    n = grid.node_count
    init = init or StationaryState.uniform(grid)
    M, U = _project(grid.check_field(init.M), grid.check_field(init.U), grid)
    lam = lambda_eliminate(M, U, problem.potential, problem)
    trace = ConvergenceTrace(TRACE_COLUMNS)
    res = residual_norm(M, U, problem)
    trace.append(_trace_row(0, res, lam, M, 0.0))
    merit = np.max(np.abs(extended_residual(problem, M, U, lam)))
    for it in range(1, cfg.max_iter + 1):
        if res < cfg.tol:
            break
        rhs = -extended_residual(problem, M, U, lam)
        delta = solve_sparse(extended_jacobian(jac_problem, M, U), rhs)
        dM, dU, dlam = delta[:n], delta[n:2 * n], delta[2 * n]
        t = 1.0
        while t >= cfg.min_damping:
            M_try = M + t * dM
            if np.min(M_try) > 0.0:
                U_try = U + t * dU
                try:
                    merit_try = np.max(np.abs(extended_residual(problem, M_try, U_try, lam + t * dlam)))
                except DomainError:
                    merit_try = np.inf
                if merit_try < (1.0 - 1e-4 * t) * merit:
                    break
            t *= 0.5
        else:
            trace.message = "line search failed"
            logger.warning("Newton line search failed at iteration %d, residual %.3e", it, res)
            break
        M, U = _project(M_try, U_try, grid)
        lam = lam + t * dlam
        merit = np.max(np.abs(extended_residual(problem, M, U, lam)))
        res = residual_norm(M, U, problem)
        trace.append(_trace_row(it, res, lam, M, t))
        logger.debug("Newton iteration %d: damping %.3g residual %.3e", it, t, res)
    trace.converged = res < cfg.tol
    if trace.converged:
        logger.info("Newton converged in %d iterations, residual %.3e", trace.n_steps, res)
    else:
        trace.message = trace.message or "iteration cap reached"
        logger.warning("Newton stopped with residual %.3e (%s)", res, trace.message)
    return _finish(problem, M, U), trace


# ---------------------------------------------------------------------------
# Policy iteration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyConfig:
    """
    Args:
        tol (float): Target sup norm of the residual
        max_iter (int): Cap on policy updates
        relaxation (float): Weight of the new iterate in (0, 1]
    """

    tol: float = 1e-9
    max_iter: int = 200
    relaxation: float = 1.0


def _policy_density(problem: MfgProblem, alpha: np.ndarray) -> np.ndarray:
    """Solve -nu Lap M + B_alpha M = 0 with the last row replaced by the mass condition."""
    grid = problem.grid
    n = grid.node_count
    operator = sp.csr_matrix(-problem.viscosity * grid.laplacian_matrix() + transport_matrix(alpha, grid))
    system = sp.vstack([operator[:-1], sp.csr_matrix(grid.cell_volume * np.ones((1, n)))])
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    M = solve_sparse(system, rhs)
    if np.min(M) <= 0.0:
        node = int(np.argmin(M))
        raise DomainError(f"policy density lost positivity at node {node} ({M[node]:.3e})", node)
    return M


def _policy_value(problem: MfgProblem, M: np.ndarray, q_hat: np.ndarray) -> Tuple[np.ndarray, float]:
    """Solve the HJB equation with g linearized at q_hat, under the zero-mean gauge."""
    grid = problem.grid
    n = grid.node_count
    ham = problem.hamiltonian
    g_hat = ham.evaluate(q_hat, M)
    alpha = ham.gradient(q_hat, M)
    operator = problem.viscosity * grid.laplacian_matrix()
    for l, S_l in enumerate(grid.stencil_matrices()):
        operator = operator - sp.diags(alpha[:, l]) @ S_l
    system = sp.bmat([
        [operator, sp.csr_matrix(np.ones((n, 1)))],
        [sp.csr_matrix(grid.cell_volume * np.ones((1, n))), None],
    ], format="csc")
    rhs = (g_hat - np.sum(alpha * q_hat, axis=1)
           - problem.coupling.apply(M, grid) - problem.cost_sign * problem.potential)
    solution = solve_sparse(system, np.concatenate([rhs, [0.0]]))
    return solution[:n], float(solution[n])


def policy_iteration_solve(problem: MfgProblem, init: Optional[StationaryState] = None,
                           cfg: Optional[PolicyConfig] = None) -> Tuple[StationaryState, ConvergenceTrace]:
    """
    Policy iteration: freeze the controls at the current value function, solve
    the linear FP equation for M, then the linearized HJB equation for (U, lambda).
    """
    _check_stationary(problem)
    cfg = cfg or PolicyConfig()
    if not 0.0 < cfg.relaxation <= 1.0:
        raise ConfigError(f"relaxation must lie in (0, 1], got {cfg.relaxation}")
    grid = problem.grid
    init = init or StationaryState.uniform(grid)
    M, U = _project(grid.check_field(init.M), grid.check_field(init.U), grid)
    trace = ConvergenceTrace(TRACE_COLUMNS)
    res = residual_norm(M, U, problem)
    trace.append(_trace_row(0, res, lambda_eliminate(M, U, problem.potential, problem), M, 0.0))
    omega = cfg.relaxation
    for it in range(1, cfg.max_iter + 1):
        if res < cfg.tol:
            break
        q_hat = grid.upwind_stencil(U)
        M_new = _policy_density(problem, problem.hamiltonian.gradient(q_hat, M))
        U_new, lam = _policy_value(problem, M_new, q_hat)
        M, U = _project((1.0 - omega) * M + omega * M_new, (1.0 - omega) * U + omega * U_new, grid)
        res = residual_norm(M, U, problem)
        trace.append(_trace_row(it, res, lam, M, omega))
        logger.debug("policy iteration %d: residual %.3e", it, res)
    trace.converged = res < cfg.tol
    if trace.converged:
        logger.info("policy iteration converged in %d iterations, residual %.3e", trace.n_steps, res)
    else:
        trace.message = "iteration cap reached"
        logger.warning("policy iteration stopped with residual %.3e", res)
    return _finish(problem, M, U), trace


STATIONARY_SOLVERS: Dict[str, Callable] = {
    "hrf": hrf_stationary_solve,
    "newton": newton_stationary_solve,
    "policy": policy_iteration_solve,
}


def solve_stationary(problem: MfgProblem, solver: str = "hrf", init: Optional[StationaryState] = None,
                     cfg=None, tol: Optional[float] = None) -> Tuple[StationaryState, ConvergenceTrace]:
    """Dispatch to one of the stationary solvers by name; ``tol`` overrides the config tolerance."""
    try:
        solve = STATIONARY_SOLVERS[solver]
    except KeyError:
        raise ConfigError(f"unknown stationary solver {solver!r}") from None
    if tol is not None:
        defaults = {"hrf": FlowConfig, "newton": NewtonConfig, "policy": PolicyConfig}
        cfg = replace(cfg or defaults[solver](), tol=tol)
    return solve(problem, init, cfg)
