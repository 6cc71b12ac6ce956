"""
Solver-agnostic inverse layer: recover the potential V from partial noisy
observations by differentiating the converged equilibrium equations.

The constraint is F(z, theta) = 0 together with linear side conditions
A z = b. Sensitivities and adjoints solve with the square matrix
K = [dF/dz; A], factored once per parameter value.
"""
import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from exceptions import ConfigError, ConvergenceError, LinearSolveError
from hrf import ConvergenceTrace
from mfg_models import MfgProblem
from mfg_stationary import StationaryState, extended_jacobian, extended_residual, solve_stationary
from mfg_timedep import SpaceTimeState, residual_td, solve_timedep, timedep_jacobian
from rkhs import DenseGram, DenseObservationMap, ObservationMap

logger = logging.getLogger(__name__)

TIKHONOV_EPS = 1e-10
OUTER_COLUMNS = ("iter", "objective", "grad_or_step_norm", "inner_iters", "seconds")


class KKTFactor:
    """Sparse LU of the square constraint matrix, with a regularized fallback."""

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = sp.csc_matrix(matrix)
        self._lu = None
        self._normal = None
        try:
            self._lu = splu(self.matrix)
            probe = self._lu.solve(np.ones(self.matrix.shape[0]))
            if not np.all(np.isfinite(probe)):
                raise RuntimeError("non-finite solve")
        except RuntimeError as e:
            logger.warning("constraint matrix singular (%s), using Tikhonov-regularized normal equations", e)
            self._lu = None
            self._regularize()

    def _regularize(self) -> None:
        K = self.matrix
        n = K.shape[0]
        try:
            self._normal = (splu(sp.csc_matrix(K.T @ K + TIKHONOV_EPS * sp.identity(n))),
                            splu(sp.csc_matrix(K @ K.T + TIKHONOV_EPS * sp.identity(n))))
        except RuntimeError as e:
            raise LinearSolveError("regularized constraint system is singular",
                                   condition_estimate=self.condition_estimate()) from e

    def condition_estimate(self) -> float:
        if self.matrix.shape[0] > 2000:
            return float("nan")
        return float(np.linalg.cond(self.matrix.toarray()))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        return self._normal[0].solve(self.matrix.T @ rhs)

    def solve_transpose(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs, trans="T")
        return self._normal[1].solve(self.matrix @ rhs)


class EquilibriumConstraint(ABC):
    """F(z, theta) = 0 and A z = b, with theta the potential on the spatial grid."""

    problem: MfgProblem
    n_state: int
    n_theta: int
    n_linear: int

    def __init__(self, problem: MfgProblem, solver: str = "hrf", tol: Optional[float] = None):
        self.problem = problem
        self.solver = solver
        self.tol = tol
        self.n_theta = problem.grid.node_count

    @abstractmethod
    def solve(self, theta: np.ndarray, warm_start: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ConvergenceTrace]:
        """Inner solve for z*(theta)."""

    @abstractmethod
    def residual(self, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def kkt_matrix(self, z: np.ndarray, theta: np.ndarray) -> sp.spmatrix:
        """[dF/dz; A], square."""

    @abstractmethod
    def jac_theta_apply(self, p: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def jac_theta_transpose(self, w: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def unpack(self, z: np.ndarray) -> Dict[str, object]:
        """Recovered fields of a state vector."""

    def _check_inner(self, trace: ConvergenceTrace) -> None:
        if not trace.converged:
            raise ConvergenceError(f"inner {self.solver} solve did not converge "
                                   f"(residual {trace.final_residual:.3e})",
                                   residual=trace.final_residual, trace=trace)


class StationaryConstraint(EquilibriumConstraint):
    """z = (M, U, lambda); F drops the last FP row; A = (mass row, gauge row)."""

    def __init__(self, problem: MfgProblem, solver: str = "hrf", tol: Optional[float] = None):
        super().__init__(problem, solver, tol)
        n = problem.grid.node_count
        self.n_state = 2 * n + 1
        self.n_linear = 2

    def solve(self, theta, warm_start=None):
        n = self.problem.grid.node_count
        init = None
        if warm_start is not None:
            init = StationaryState(warm_start[:n].copy(), warm_start[n:2 * n].copy(), float(warm_start[2 * n]))
        state, trace = solve_stationary(self.problem.with_potential(theta), self.solver, init, tol=self.tol)
        self._check_inner(trace)
        return np.concatenate([state.M, state.U, [state.lam]]), trace

    def residual(self, z, theta):
        n = self.problem.grid.node_count
        return extended_residual(self.problem.with_potential(theta), z[:n], z[n:2 * n], z[2 * n])[:-2]

    def kkt_matrix(self, z, theta):
        n = self.problem.grid.node_count
        return extended_jacobian(self.problem.with_potential(theta), z[:n], z[n:2 * n])

    def jac_theta_apply(self, p):
        out = np.zeros(self.n_state - self.n_linear)
        out[: self.n_theta] = self.problem.cost_sign * p
        return out

    def jac_theta_transpose(self, w):
        return self.problem.cost_sign * w[: self.n_theta]

    def unpack(self, z):
        n = self.problem.grid.node_count
        return {"m": z[:n], "u": z[n:2 * n], "lambda": float(z[2 * n])}


class TimeDependentConstraint(EquilibriumConstraint):
    """z = (M_1..M_NT, U_0..U_{NT-1}); no side conditions."""

    def __init__(self, problem: MfgProblem, solver: str = "hrf", tol: Optional[float] = None):
        super().__init__(problem, solver, tol)
        self.n_slab = problem.n_time * problem.grid.node_count
        self.n_state = 2 * self.n_slab
        self.n_linear = 0

    def _state(self, z: np.ndarray, theta: Optional[np.ndarray] = None) -> SpaceTimeState:
        problem = self.problem if theta is None else self.problem.with_potential(theta)
        return SpaceTimeState.from_stacked(problem, z)

    def solve(self, theta, warm_start=None):
        problem = self.problem.with_potential(theta)
        init = None if warm_start is None else SpaceTimeState.from_stacked(problem, warm_start)
        Y, trace = solve_timedep(problem, self.solver, init, tol=self.tol)
        self._check_inner(trace)
        return Y.stacked(), trace

    def residual(self, z, theta):
        return residual_td(self._state(z, theta)).stacked()

    def kkt_matrix(self, z, theta):
        return timedep_jacobian(self._state(z, theta))

    def jac_theta_apply(self, p):
        out = np.zeros(self.n_state)
        out[: self.n_slab] = self.problem.cost_sign * np.tile(p, self.problem.n_time)
        return out

    def jac_theta_transpose(self, w):
        r_blocks = w[: self.n_slab].reshape(self.problem.n_time, self.n_theta)
        return self.problem.cost_sign * np.sum(r_blocks, axis=0)

    def unpack(self, z):
        Y = self._state(z)
        return {"m": Y.full_density(), "u": Y.full_value(), "lambda": None}


@dataclass
class _Solution:
    z: np.ndarray
    inner_iters: int
    kkt: Optional[KKTFactor] = None


class ReducedObjective:
    """
    (alpha/2)|J theta|^2 + (beta/2)|W z*(theta) - z_obs|^2 + (gamma/2)|G theta - theta_obs|^2.

    Args:
        constraint (EquilibriumConstraint): Equilibrium equations and inner solver
        W (ObservationMap): Observation map on the density part of z
        z_obs (np.ndarray): Density observations
        G (DenseObservationMap): Observation map on theta
        theta_obs (np.ndarray): Potential observations
        regularizer (DenseGram): Supplies J with J^T J = (K_V + jitter I)^(-1)
        alpha, beta, gamma (float): Weights
    """

    def __init__(self, constraint: EquilibriumConstraint, W: ObservationMap, z_obs: np.ndarray,
                 G: DenseObservationMap, theta_obs: np.ndarray, regularizer: DenseGram,
                 alpha: float, beta: float, gamma: float):
        self.constraint = constraint
        self.W = W
        self.z_obs = np.asarray(z_obs, dtype=float)
        self.G = G
        self.theta_obs = np.asarray(theta_obs, dtype=float)
        self.regularizer = regularizer
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self._cache: Dict[bytes, _Solution] = {}
        self._last_z: Optional[np.ndarray] = None
        self.inner_solves = 0

    # -- state cache -------------------------------------------------------

    def _solution(self, theta: np.ndarray) -> _Solution:
        key = np.asarray(theta, dtype=float).tobytes()
        if key not in self._cache:
            z, trace = self.constraint.solve(theta, self._last_z)
            self.inner_solves += 1
            self._last_z = z
            if len(self._cache) > 8:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = _Solution(z, trace.n_steps)
        return self._cache[key]

    def _kkt(self, theta: np.ndarray) -> KKTFactor:
        sol = self._solution(theta)
        if sol.kkt is None:
            sol.kkt = KKTFactor(self.constraint.kkt_matrix(sol.z, theta))
        return sol.kkt

    def state(self, theta: np.ndarray) -> np.ndarray:
        return self._solution(theta).z

    def inner_iterations(self, theta: np.ndarray) -> int:
        return self._solution(theta).inner_iters

    def _field(self, z: np.ndarray) -> np.ndarray:
        return z[: self.W.n_unknowns]

    def _embed(self, field_vector: np.ndarray) -> np.ndarray:
        out = np.zeros(self.constraint.n_state)
        out[: self.W.n_unknowns] = field_vector
        return out

    # -- objective pieces --------------------------------------------------

    def residual_vector(self, theta: np.ndarray) -> np.ndarray:
        """r(theta) with objective = |r|^2 / 2."""
        theta = np.asarray(theta, dtype=float)
        z = self.state(theta)
        return np.concatenate([
            np.sqrt(self.alpha) * self.regularizer.sqrt_precision_apply(theta),
            np.sqrt(self.beta) * (self.W.apply(self._field(z)) - self.z_obs),
            np.sqrt(self.gamma) * (self.G.apply(theta) - self.theta_obs),
        ])

    def evaluate_objective(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        z = self.state(theta)
        misfit = self.W.apply(self._field(z)) - self.z_obs
        prior = self.G.apply(theta) - self.theta_obs
        return float(0.5 * self.alpha * theta @ self.regularizer.precision_apply(theta)
                     + 0.5 * self.beta * misfit @ misfit
                     + 0.5 * self.gamma * prior @ prior)

    def _explicit_gradient(self, theta: np.ndarray) -> np.ndarray:
        return (self.gamma * self.G.linear_transpose(self.G.apply(theta) - self.theta_obs)
                + self.alpha * self.regularizer.precision_apply(theta))

    def adjoint_gradient(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of the reduced objective from one transposed constraint solve."""
        theta = np.asarray(theta, dtype=float)
        grad = self._explicit_gradient(theta)
        if self.beta == 0.0:
            return grad
        z = self.state(theta)
        misfit = self.W.apply(self._field(z)) - self.z_obs
        rhs = -self.beta * self._embed(self.W.linear_transpose(misfit))
        adjoint = self._kkt(theta).solve_transpose(rhs)
        n_f = self.constraint.n_state - self.constraint.n_linear
        return grad + self.constraint.jac_theta_transpose(adjoint[:n_f])

    def sensitivity(self, theta: np.ndarray, p: np.ndarray) -> np.ndarray:
        """dz for a parameter increment p: K dz = [-dF/dtheta p; 0]."""
        rhs = np.concatenate([-self.constraint.jac_theta_apply(p), np.zeros(self.constraint.n_linear)])
        return self._kkt(theta).solve(rhs)

    def jr_apply(self, theta: np.ndarray, p: np.ndarray) -> np.ndarray:
        dz = self.sensitivity(theta, p)
        return np.concatenate([
            np.sqrt(self.alpha) * self.regularizer.sqrt_precision_apply(p),
            np.sqrt(self.beta) * self.W.linear(self._field(dz)),
            np.sqrt(self.gamma) * self.G.linear(p),
        ])

    def jr_transpose(self, theta: np.ndarray, w: np.ndarray) -> np.ndarray:
        n_reg = self.n_theta
        n_w = self.W.n_obs
        w_reg, w_obs, w_prior = w[:n_reg], w[n_reg:n_reg + n_w], w[n_reg + n_w:]
        out = (np.sqrt(self.alpha) * self.regularizer.sqrt_precision_transpose(w_reg)
               + np.sqrt(self.gamma) * self.G.linear_transpose(w_prior))
        if self.beta != 0.0:
            rhs = np.sqrt(self.beta) * self._embed(self.W.linear_transpose(w_obs))
            adjoint = self._kkt(theta).solve_transpose(rhs)
            n_f = self.constraint.n_state - self.constraint.n_linear
            out = out - self.constraint.jac_theta_transpose(adjoint[:n_f])
        return out

    @property
    def n_theta(self) -> int:
        return self.constraint.n_theta

    def gn_step(self, theta: np.ndarray, rtol: float = 1e-8, maxiter: int = 200,
                levenberg: float = 0.0) -> "GNStep":
        """
        Solve (J_r^T J_r + mu I) p = -J_r^T r by conjugate gradients; every
        product costs one sensitivity and one transposed solve.
        """
        theta = np.asarray(theta, dtype=float)
        rhs = -self.jr_transpose(theta, self.residual_vector(theta))
        if not np.any(rhs):
            return GNStep(np.zeros_like(theta), 0, True, levenberg)
        mu = levenberg
        for attempt in range(2):
            counter = {"n": 0}

            def normal_matvec(p, mu=mu):
                counter["n"] += 1
                return self.jr_transpose(theta, self.jr_apply(theta, p)) + mu * p

            operator = LinearOperator((self.n_theta, self.n_theta), matvec=normal_matvec, dtype=float)
            p, info = cg(operator, rhs, rtol=rtol, maxiter=maxiter)
            if info == 0:
                return GNStep(p, counter["n"], True, mu)
            mu = max(10.0 * mu, 1e-8 * np.linalg.norm(rhs))
            logger.warning("CG hit its cap of %d iterations, retrying with Levenberg damping %.2e", maxiter, mu)
        logger.warning("Gauss-Newton system not solved to tolerance, using best iterate")
        return GNStep(p, counter["n"], False, mu)


@dataclass
class GNStep:
    p: np.ndarray
    cg_iters: int
    converged: bool
    levenberg: float


@dataclass(frozen=True)
class OuterConfig:
    """
    Args:
        max_iter (int): Outer iteration cap
        tol (float): Stop once the objective changes by less than this
        armijo_c (float): Sufficient-decrease constant
        shrink (float): Backtracking factor
        initial_step (float): First trial step of the line search
        max_backtracks (int): Line-search budget
        gd_metric (str): "euclidean" or "kernel" (steepest descent in the RKHS metric)
        cg_rtol (float): Relative tolerance of the Gauss-Newton CG solve
        cg_maxiter (int): CG iteration cap
        levenberg (float): Initial Levenberg damping
    """

    max_iter: int = 200
    tol: float = 1e-6
    armijo_c: float = 1e-4
    shrink: float = 0.5
    initial_step: float = 1.0
    max_backtracks: int = 40
    gd_metric: str = "euclidean"
    cg_rtol: float = 1e-8
    cg_maxiter: int = 200
    levenberg: float = 0.0

    def __post_init__(self):
        if self.gd_metric not in ("euclidean", "kernel"):
            raise ConfigError(f"unknown gradient metric {self.gd_metric!r}")


@dataclass
class OuterTrace:
    rows: List[Dict[str, float]] = field(default_factory=list)
    converged: bool = False
    message: str = ""

    def append(self, iteration: int, objective: float, norm: float, inner_iters: int, seconds: float) -> None:
        self.rows.append(dict(zip(OUTER_COLUMNS, (iteration, objective, norm, inner_iters, seconds))))

    @property
    def n_iter(self) -> int:
        return int(self.rows[-1]["iter"]) if self.rows else 0

    def objectives(self) -> np.ndarray:
        return np.array([row["objective"] for row in self.rows])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(OUTER_COLUMNS))


@dataclass
class OuterResult:
    method: str
    theta: np.ndarray
    z: np.ndarray
    fields: Dict[str, object]
    trace: OuterTrace


def _gd_step(objective: ReducedObjective, theta, value, cfg: OuterConfig):
    grad = objective.adjoint_gradient(theta)
    if cfg.gd_metric == "kernel":
        direction = -objective.regularizer.kernel_apply(grad)
    else:
        direction = -grad
    slope = float(grad @ direction)
    t = cfg.initial_step
    for _ in range(cfg.max_backtracks):
        trial = theta + t * direction
        trial_value = objective.evaluate_objective(trial)
        if trial_value <= value + cfg.armijo_c * t * slope:
            return trial, trial_value, float(np.linalg.norm(grad))
        t *= cfg.shrink
    return None, value, float(np.linalg.norm(grad))


def _gn_step(objective: ReducedObjective, theta, value, cfg: OuterConfig):
    step = objective.gn_step(theta, cfg.cg_rtol, cfg.cg_maxiter, cfg.levenberg)
    t = 1.0
    for _ in range(cfg.max_backtracks):
        trial = theta + t * step.p
        trial_value = objective.evaluate_objective(trial)
        if trial_value <= value:
            return trial, trial_value, float(np.linalg.norm(t * step.p))
        t *= 0.5
    return None, value, float(np.linalg.norm(step.p))


def run_outer(objective: ReducedObjective, method: str, theta_init: np.ndarray,
              cfg: Optional[OuterConfig] = None) -> OuterResult:
    """
    Minimize the reduced objective by gradient descent ("gd") or Gauss-Newton ("gn").

    Raises:
        ConvergenceError: An inner solve failed; the error carries the partial outer trace
    """
    cfg = cfg or OuterConfig()
    if method not in ("gd", "gn"):
        raise ConfigError(f"unknown outer method {method!r}")
    step_fn = _gd_step if method == "gd" else _gn_step
    trace = OuterTrace()
    start = time.perf_counter()
    theta = np.asarray(theta_init, dtype=float).copy()
    try:
        value = objective.evaluate_objective(theta)
        trace.append(0, value, float(np.linalg.norm(objective.adjoint_gradient(theta))),
                     objective.inner_iterations(theta), time.perf_counter() - start)
        for it in range(1, cfg.max_iter + 1):
            new_theta, new_value, norm = step_fn(objective, theta, value, cfg)
            if new_theta is None:
                trace.message = "line search failed"
                logger.warning("%s line search failed at iteration %d", method.upper(), it)
                break
            change = abs(new_value - value)
            theta, value = new_theta, new_value
            trace.append(it, value, norm, objective.inner_iterations(theta), time.perf_counter() - start)
            logger.debug("%s iteration %d: objective %.10e change %.3e", method.upper(), it, value, change)
            if change < cfg.tol:
                trace.converged = True
                break
    except ConvergenceError as e:
        trace.message = f"inner solve failed: {e}"
        raise ConvergenceError(f"{method.upper()} aborted at iteration {len(trace.rows)}: {e}",
                               residual=e.residual, trace=trace) from e
    if trace.converged:
        logger.info("%s converged in %d iterations, objective %.6e", method.upper(), trace.n_iter, value)
    elif not trace.message:
        trace.message = "iteration cap reached"
        logger.warning("%s stopped at the iteration cap, objective %.6e", method.upper(), value)
    z = objective.state(theta)
    return OuterResult(method, theta, z, objective.constraint.unpack(z), trace)
