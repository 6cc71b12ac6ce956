"""
Model pieces of a discrete mean-field game: numerical Hamiltonians, couplings,
the transport operator and the problem definition tying them to a grid.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from exceptions import ConfigError, DomainError, GridError
from torus_grid import TorusGrid

logger = logging.getLogger(__name__)

CONGESTION_FLOOR = 1e-10
DEFAULT_SMOOTHING = 1e-3


# ---------------------------------------------------------------------------
# Numerical Hamiltonians
# ---------------------------------------------------------------------------

class NumericalHamiltonian(ABC):
    """
    Upwind numerical Hamiltonian g(x, q, m) acting on per-node stencils.

    ``q`` always has shape (N, 2*dim) with columns ordered as
    ``TorusGrid.upwind_stencil``; ``m`` is the density per node.
    """

    kind = "custom"
    depends_on_density = False

    @abstractmethod
    def evaluate(self, q: np.ndarray, m: Optional[np.ndarray] = None,
                 x: Optional[np.ndarray] = None) -> np.ndarray:
        ...

    @abstractmethod
    def gradient(self, q: np.ndarray, m: Optional[np.ndarray] = None,
                 x: Optional[np.ndarray] = None) -> np.ndarray:
        ...

    def hessian(self, q: np.ndarray, m: Optional[np.ndarray] = None,
                x: Optional[np.ndarray] = None, step: float = 1e-6) -> np.ndarray:
        """Second derivatives in q, shape (N, w, w); central differences of ``gradient``."""
        q = np.asarray(q, dtype=float)
        width = q.shape[1]
        out = np.empty((q.shape[0], width, width))
        for col in range(width):
            bump = np.zeros(width)
            bump[col] = step
            out[:, :, col] = (self.gradient(q + bump, m, x) - self.gradient(q - bump, m, x)) / (2 * step)
        return out

    def density_derivative(self, q: np.ndarray, m: np.ndarray,
                           x: Optional[np.ndarray] = None) -> np.ndarray:
        return np.zeros(q.shape[0])

    def mixed_derivative(self, q: np.ndarray, m: np.ndarray,
                         x: Optional[np.ndarray] = None) -> np.ndarray:
        return np.zeros(q.shape)

    def continuous(self, p: np.ndarray, m: Optional[np.ndarray] = None) -> np.ndarray:
        """Closed-form H(p) the scheme is consistent with; p has shape (N, dim)."""
        raise NotImplementedError(f"{type(self).__name__} has no closed form")


def _softplus(x: np.ndarray, eps: float) -> np.ndarray:
    return eps * np.logaddexp(0.0, x / eps)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _upwind_clamps(q: np.ndarray, shift: np.ndarray, smoothing: Optional[float]):
    """
    Upwind-selected slopes and their first two derivatives.

    Forward columns keep min(q + P, 0), backward columns keep max(q + P, 0).
    With ``smoothing`` the clamps are replaced by softplus versions.
    """
    q = np.asarray(q, dtype=float)
    width = q.shape[1]
    per_column = np.repeat(shift, 2)[:width]
    z = q + per_column
    forward = np.zeros(width, dtype=bool)
    forward[0::2] = True
    if smoothing is None:
        clamp = np.where(forward, np.minimum(z, 0.0), np.maximum(z, 0.0))
        slope = np.where(forward, z < 0.0, z > 0.0).astype(float)
        curvature = np.zeros_like(z)
        return clamp, slope, curvature
    eps = smoothing
    signed = np.where(forward, -z, z)
    sig = _sigmoid(signed / eps)
    clamp = np.where(forward, -_softplus(signed, eps), _softplus(signed, eps))
    slope = sig
    curvature = np.where(forward, -1.0, 1.0) * sig * (1.0 - sig) / eps
    return clamp, slope, curvature


class GodunovQuadratic(NumericalHamiltonian):
    """
    Godunov scheme for H(p) = |P + p|^2 / 2.

    With ``shift`` zero this is the plain quadratic Hamiltonian. ``smoothing``
    switches the clamps to softplus versions of width epsilon; without it the
    derivative at a kink is the one-sided value 0.

    Args:
        shift (Sequence[float]): Constant vector P (length dim); zeros for |p|^2/2
        smoothing (float): Softplus width, or None for exact clamps
    """

    def __init__(self, shift: Optional[Sequence[float]] = None, smoothing: Optional[float] = None):
        self.shift = np.atleast_1d(np.asarray(shift if shift is not None else [0.0], dtype=float))
        self.smoothing = smoothing

    @property
    def kind(self) -> str:
        return "shifted_quadratic" if np.any(self.shift != 0.0) else "godunov_quadratic"

    def _shift_for(self, q: np.ndarray) -> np.ndarray:
        dim = q.shape[1] // 2
        if self.shift.size == 1:
            return np.full(dim, self.shift[0])
        if self.shift.size != dim:
            raise GridError(f"shift of length {self.shift.size} does not match dimension {dim}")
        return self.shift

    def smoothed(self, eps: float = DEFAULT_SMOOTHING) -> "GodunovQuadratic":
        return GodunovQuadratic(self.shift, smoothing=eps)

    def evaluate(self, q, m=None, x=None):
        clamp, _, _ = _upwind_clamps(q, self._shift_for(q), self.smoothing)
        return 0.5 * np.sum(clamp ** 2, axis=1)

    def gradient(self, q, m=None, x=None):
        clamp, slope, _ = _upwind_clamps(q, self._shift_for(q), self.smoothing)
        return clamp * slope

    def hessian(self, q, m=None, x=None, step=1e-6):
        clamp, slope, curvature = _upwind_clamps(q, self._shift_for(q), self.smoothing)
        diag = slope ** 2 + clamp * curvature
        out = np.zeros(q.shape + (q.shape[1],))
        idx = np.arange(q.shape[1])
        out[:, idx, idx] = diag
        return out

    def continuous(self, p, m=None):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        shift = self.shift if self.shift.size == p.shape[1] else np.full(p.shape[1], self.shift[0])
        return 0.5 * np.sum((p + shift) ** 2, axis=1)

    def __repr__(self):
        return f"GodunovQuadratic(shift={self.shift.tolist()}, smoothing={self.smoothing})"


class CongestionHamiltonian(NumericalHamiltonian):
    """
    Godunov-consistent realization of H(p, m) = |Q + p|^b / (b m^a).

    The upwind-selected slopes S = sum of squared clamps give
    g = S^(b/2) / (b * max(m, floor)^a).
    """

    kind = "congestion_power"
    depends_on_density = True

    def __init__(self, a: float, b: float, shift: Sequence[float],
                 floor: float = CONGESTION_FLOOR, smoothing: Optional[float] = None):
        self.a = float(a)
        self.b = float(b)
        self.shift = np.asarray(shift, dtype=float)
        self.floor = floor
        self.smoothing = smoothing

    def smoothed(self, eps: float = DEFAULT_SMOOTHING) -> "CongestionHamiltonian":
        return CongestionHamiltonian(self.a, self.b, self.shift, self.floor, smoothing=eps)

    def _parts(self, q, m):
        if m is None:
            raise DomainError("congestion Hamiltonian needs the density")
        clamp, slope, curvature = _upwind_clamps(q, self.shift, self.smoothing)
        squares = np.sum(clamp ** 2, axis=1)
        dens = np.maximum(np.asarray(m, dtype=float), self.floor)
        return clamp, slope, curvature, squares, dens

    def _power(self, squares: np.ndarray, exponent: float) -> np.ndarray:
        out = np.zeros_like(squares)
        positive = squares > 0.0
        out[positive] = squares[positive] ** exponent
        if exponent == 0.0:
            out[~positive] = 1.0
        return out

    def evaluate(self, q, m=None, x=None):
        _, _, _, squares, dens = self._parts(q, m)
        return self._power(squares, 0.5 * self.b) / (self.b * dens ** self.a)

    def gradient(self, q, m=None, x=None):
        clamp, slope, _, squares, dens = self._parts(q, m)
        factor = self._power(squares, 0.5 * self.b - 1.0) / dens ** self.a
        return factor[:, None] * clamp * slope

    def hessian(self, q, m=None, x=None, step=1e-6):
        clamp, slope, curvature, squares, dens = self._parts(q, m)
        width = q.shape[1]
        first = clamp * slope
        outer = np.einsum("ni,nj->nij", first, first)
        coef_outer = (self.b - 2.0) * self._power(squares, 0.5 * self.b - 2.0)
        coef_diag = self._power(squares, 0.5 * self.b - 1.0)
        out = coef_outer[:, None, None] * outer
        idx = np.arange(width)
        out[:, idx, idx] += coef_diag[:, None] * (slope ** 2 + clamp * curvature)
        return out / (dens ** self.a)[:, None, None]

    def density_derivative(self, q, m, x=None):
        active = np.asarray(m, dtype=float) > self.floor
        dens = np.maximum(np.asarray(m, dtype=float), self.floor)
        return np.where(active, -self.a * self.evaluate(q, m) / dens, 0.0)

    def mixed_derivative(self, q, m, x=None):
        active = np.asarray(m, dtype=float) > self.floor
        dens = np.maximum(np.asarray(m, dtype=float), self.floor)
        return np.where(active[:, None], -self.a * self.gradient(q, m) / dens[:, None], 0.0)

    def continuous(self, p, m=None):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        dens = np.ones(p.shape[0]) if m is None else np.asarray(m, dtype=float)
        return np.linalg.norm(p + self.shift, axis=1) ** self.b / (self.b * dens ** self.a)


class CustomHamiltonian(NumericalHamiltonian):
    """User-supplied g and its q-gradient; second derivatives by finite differences."""

    kind = "custom"

    def __init__(self, evaluate: Callable, gradient: Callable, depends_on_density: bool = False):
        self._evaluate = evaluate
        self._gradient = gradient
        self.depends_on_density = depends_on_density

    def evaluate(self, q, m=None, x=None):
        return np.asarray(self._evaluate(q, m, x), dtype=float)

    def gradient(self, q, m=None, x=None):
        return np.asarray(self._gradient(q, m, x), dtype=float)


# ---------------------------------------------------------------------------
# Couplings
# ---------------------------------------------------------------------------

def _first_bad_node(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


class Coupling(ABC):
    kind = "custom"
    componentwise = False

    @abstractmethod
    def apply(self, M: np.ndarray, grid: TorusGrid) -> np.ndarray:
        ...

    @abstractmethod
    def derivative(self, M: np.ndarray, grid: TorusGrid) -> sp.csr_matrix:
        """Jacobian df/dM as a sparse matrix."""


@dataclass(frozen=True)
class PowerCoupling(Coupling):
    exponent: float
    scale: float = 1.0
    kind = "power"
    componentwise = True

    def _check(self, M: np.ndarray) -> None:
        if float(self.exponent).is_integer():
            return
        bad = M < 0.0
        if np.any(bad):
            node = _first_bad_node(bad)
            raise DomainError(f"negative density {M[node]:.3e} at node {node} for m^{self.exponent}", node)

    def apply(self, M, grid):
        M = grid.check_field(M)
        self._check(M)
        return self.scale * M ** self.exponent

    def derivative(self, M, grid):
        M = grid.check_field(M)
        self._check(M)
        return sp.diags(self.scale * self.exponent * M ** (self.exponent - 1.0), format="csr")


@dataclass(frozen=True)
class CubicCoupling(PowerCoupling):
    exponent: float = 3.0
    kind = "cubic"


@dataclass(frozen=True)
class LogCoupling(Coupling):
    """f(m) = ln(m) / k."""

    k: float
    kind = "log_scaled"
    componentwise = True

    def _check(self, M: np.ndarray) -> None:
        bad = M <= 0.0
        if np.any(bad):
            node = _first_bad_node(bad)
            raise DomainError(f"non-positive density {M[node]:.3e} at node {node} under log coupling", node)

    def apply(self, M, grid):
        M = grid.check_field(M)
        self._check(M)
        return np.log(M) / self.k

    def derivative(self, M, grid):
        M = grid.check_field(M)
        self._check(M)
        return sp.diags(1.0 / (self.k * M), format="csr")


@dataclass(frozen=True)
class DriftCoupling(Coupling):
    """
    f(m) = m^exponent + b(x) . grad m, gradient by centered differences.

    ``drift`` maps node coordinates (x[, y]) to a tuple of dim component arrays.
    """

    drift: Callable
    exponent: float = 2.0
    kind = "local_drift"

    def _components(self, grid: TorusGrid) -> Tuple[np.ndarray, ...]:
        coords = grid.nodes()
        comps = self.drift(*coords.T)
        return tuple(np.broadcast_to(np.asarray(c, dtype=float), (grid.node_count,)) for c in comps)

    def apply(self, M, grid):
        M = grid.check_field(M)
        out = M ** self.exponent
        for axis, comp in enumerate(self._components(grid), start=1):
            out = out + comp * grid.centered_diff(M, axis)
        return out

    def derivative(self, M, grid):
        M = grid.check_field(M)
        jac = sp.diags(self.exponent * M ** (self.exponent - 1.0))
        for axis, comp in enumerate(self._components(grid), start=1):
            centered = 0.5 * (grid.diff_matrix(axis, 1) + grid.diff_matrix(axis, -1))
            jac = jac + sp.diags(comp) @ centered
        return sp.csr_matrix(jac)


@dataclass(frozen=True)
class NonlocalCoupling(Coupling):
    """f(m) = c (I - Delta_h)^(-repeats) m."""

    scale: float
    repeats: int = 2
    kind = "nonlocal_smooth"

    def apply(self, M, grid):
        return self.scale * grid.helmholtz_solve(M, self.repeats)

    def derivative(self, M, grid):
        return sp.csr_matrix(self.scale * grid.helmholtz_inverse(self.repeats))


def apply_coupling(M: np.ndarray, coupling: Coupling, grid: TorusGrid) -> np.ndarray:
    return coupling.apply(M, grid)


# ---------------------------------------------------------------------------
# Problem definition and transport
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MfgProblem:
    """
    A discrete MFG on a torus grid.

    Stationary problems leave ``n_time`` unset. Time-dependent problems carry
    the horizon, the number of time slices, the initial density (renormalized
    to unit mass) and the terminal value.

    Args:
        grid (TorusGrid): Spatial grid
        viscosity (float): nu >= 0
        hamiltonian (NumericalHamiltonian): Numerical Hamiltonian g
        coupling (Coupling): Coupling f
        potential (np.ndarray): Spatial cost V_h on the grid
        cost_sign (float): Sign with which V_h enters the HJB residual
        horizon (float): Final time T (time-dependent only)
        n_time (int): Number of time steps N_T (time-dependent only)
        initial_density (np.ndarray): M_0 samples
        terminal_value (np.ndarray): U_{N_T} samples
        name (str): Label used in logs and outputs
    """

    grid: TorusGrid
    viscosity: float
    hamiltonian: NumericalHamiltonian
    coupling: Coupling
    potential: np.ndarray
    cost_sign: float = 1.0
    horizon: Optional[float] = None
    n_time: Optional[int] = None
    initial_density: Optional[np.ndarray] = None
    terminal_value: Optional[np.ndarray] = None
    name: str = "custom"

    def __post_init__(self):
        if self.viscosity < 0:
            raise ConfigError(f"viscosity must be nonnegative, got {self.viscosity}")
        object.__setattr__(self, "potential", self.grid.check_field(self.potential))
        if self.n_time is None:
            return
        if int(self.n_time) != self.n_time or self.n_time < 1:
            raise ConfigError(f"n_time must be a positive integer, got {self.n_time}")
        if self.horizon is None or self.horizon <= 0:
            raise ConfigError("time-dependent problems need a positive horizon")
        if self.initial_density is None:
            raise ConfigError("time-dependent problems need an initial density")
        m0 = self.grid.check_field(self.initial_density)
        if np.any(m0 <= 0):
            node = _first_bad_node(m0 <= 0)
            raise DomainError(f"initial density must be positive (node {node})", node)
        mass = self.grid.mean(m0)
        if abs(mass - 1.0) > 1e-14:
            m0 = m0 / mass
        m0 = m0.copy()
        m0.setflags(write=False)
        object.__setattr__(self, "initial_density", m0)
        terminal = (np.zeros(self.grid.node_count) if self.terminal_value is None
                    else self.grid.check_field(self.terminal_value).copy())
        terminal.setflags(write=False)
        object.__setattr__(self, "terminal_value", terminal)

    @property
    def is_time_dependent(self) -> bool:
        return self.n_time is not None

    @property
    def time_step(self) -> float:
        if not self.is_time_dependent:
            raise AttributeError("stationary problems have no time step")
        return self.horizon / self.n_time

    def with_potential(self, potential: np.ndarray) -> "MfgProblem":
        return replace(self, potential=np.asarray(potential, dtype=float))

    def with_hamiltonian(self, hamiltonian: NumericalHamiltonian) -> "MfgProblem":
        return replace(self, hamiltonian=hamiltonian)

    def hamiltonian_terms(self, U: np.ndarray, M: np.ndarray):
        """Stencil, g values and q-gradient of g at [D_h U] with density M."""
        q = self.grid.upwind_stencil(U)
        return q, self.hamiltonian.evaluate(q, M), self.hamiltonian.gradient(q, M)


def divergence_of_flux(alpha: np.ndarray, M: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """-sum over axes of D^-(M alpha_fwd) + D^+(M alpha_bwd) for per-node slopes ``alpha``."""
    out = np.zeros(grid.node_count)
    for axis in range(1, grid.dim + 1):
        col = 2 * (axis - 1)
        out -= grid.one_sided_diff(M * alpha[:, col], axis, -1)
        out -= grid.one_sided_diff(M * alpha[:, col + 1], axis, 1)
    return out


def transport_operator(U: np.ndarray, M: np.ndarray, problem: MfgProblem) -> np.ndarray:
    """B_h(U, M), with the Hamiltonian gradient taken at [D_h U] and density M."""
    grid = problem.grid
    M = grid.check_field(M)
    _, _, alpha = problem.hamiltonian_terms(grid.check_field(U), M)
    return divergence_of_flux(alpha, M, grid)


def transport_matrix(alpha: np.ndarray, grid: TorusGrid) -> sp.csr_matrix:
    """Matrix of M -> divergence_of_flux(alpha, M) for frozen slopes ``alpha``."""
    total = sp.csr_matrix((grid.node_count, grid.node_count))
    for col, stencil in enumerate(grid.stencil_matrices()):
        total = total + stencil.T @ sp.diags(alpha[:, col])
    return sp.csr_matrix(total)


def adjoint_identity_check(U: np.ndarray, M: np.ndarray, V_test: np.ndarray, problem: MfgProblem) -> float:
    """|<B_h(U,M), V>_h - <M grad_q g([D_h U]), [D_h V]>_h|."""
    grid = problem.grid
    lhs = grid.inner(transport_operator(U, M, problem), V_test)
    _, _, alpha = problem.hamiltonian_terms(U, M)
    rhs = grid.cell_volume * np.sum(M[:, None] * alpha * grid.upwind_stencil(V_test))
    return abs(lhs - float(rhs))
