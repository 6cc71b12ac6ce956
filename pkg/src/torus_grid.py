"""
Uniform periodic grids on the unit torus and the finite-difference calculus
used by every residual in the toolkit.

Fields are flat numpy vectors of length ``node_count``. For ``dim == 2`` the
node (i, j) sits at flat index ``i * n_per_axis + j`` with i running along
axis 1 (x) and j along axis 2 (y).
"""
import functools
import logging
from dataclasses import dataclass
from typing import Callable, List, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from exceptions import ConvergenceError, GridError

logger = logging.getLogger(__name__)

Sign = Union[int, str]


def _parse_sign(sign: Sign) -> int:
    if sign in (1, "+", "plus"):
        return 1
    if sign in (-1, "-", "minus"):
        return -1
    raise GridError(f"difference sign must be '+' or '-', got {sign!r}")


@dataclass(frozen=True)
class TorusGrid:
    """
    Uniform periodic grid with ``n_per_axis`` nodes per axis in dimension 1 or 2.

    Args:
        dim (int): Spatial dimension, 1 or 2
        n_per_axis (int): Number of nodes N_h along each axis
    """

    dim: int
    n_per_axis: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"only dim 1 and 2 are supported, got {self.dim}")
        if int(self.n_per_axis) != self.n_per_axis or self.n_per_axis < 2:
            raise GridError(f"n_per_axis must be an integer >= 2, got {self.n_per_axis}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_per_axis

    @property
    def node_count(self) -> int:
        return self.n_per_axis ** self.dim

    @property
    def shape(self) -> tuple:
        return (self.n_per_axis,) * self.dim

    @property
    def cell_volume(self) -> float:
        """Weight h^dim of the discrete pairing."""
        return self.spacing ** self.dim

    @property
    def stencil_width(self) -> int:
        return 2 * self.dim

    def nodes(self) -> np.ndarray:
        """Node coordinates as an array of shape (node_count, dim), row-major."""
        axis = np.arange(self.n_per_axis) * self.spacing
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def sample(self, fn: Callable[..., np.ndarray]) -> np.ndarray:
        """Evaluate ``fn(x)`` or ``fn(x, y)`` at every node."""
        coords = self.nodes()
        values = np.asarray(fn(*coords.T), dtype=float)
        return np.broadcast_to(values, (self.node_count,)).copy()

    def check_field(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.node_count,):
            raise GridError(f"field of shape {y.shape} does not live on a grid with {self.node_count} nodes")
        return y

    def _check_axis(self, axis: int) -> None:
        if axis not in range(1, self.dim + 1):
            raise GridError(f"axis {axis} out of range for a {self.dim}-dimensional grid")

    def one_sided_diff(self, y: np.ndarray, axis: int, sign: Sign) -> np.ndarray:
        """
        Forward (sign '+') or backward (sign '-') difference along ``axis`` with periodic wrap.

        Args:
            y (np.ndarray): Field values
            axis (int): 1 or 2
            sign (int | str): '+' / 1 for D^+, '-' / -1 for D^-

        Returns:
            np.ndarray: The differenced field
        """
        self._check_axis(axis)
        s = _parse_sign(sign)
        grid_values = self.check_field(y).reshape(self.shape)
        neighbor = np.roll(grid_values, -s, axis=axis - 1)
        diff = (neighbor - grid_values) if s > 0 else (grid_values - neighbor)
        return diff.ravel() / self.spacing

    def centered_diff(self, y: np.ndarray, axis: int) -> np.ndarray:
        return 0.5 * (self.one_sided_diff(y, axis, 1) + self.one_sided_diff(y, axis, -1))

    def laplacian(self, y: np.ndarray) -> np.ndarray:
        """Five-point (dim 2) or three-point (dim 1) periodic Laplacian."""
        grid_values = self.check_field(y).reshape(self.shape)
        out = -2.0 * self.dim * grid_values
        for ax in range(self.dim):
            out = out + np.roll(grid_values, 1, axis=ax) + np.roll(grid_values, -1, axis=ax)
        return out.ravel() / self.spacing ** 2

    def upwind_stencil(self, y: np.ndarray) -> np.ndarray:
        """
        Per-node upwind slopes, shape (node_count, 2*dim).

        Columns are (D1+ y, D1- y) for dim 1 and (D1+ y, D1- y, D2+ y, D2- y)
        for dim 2, all taken at the node itself.
        """
        columns = []
        for axis in range(1, self.dim + 1):
            columns.append(self.one_sided_diff(y, axis, 1))
            columns.append(self.one_sided_diff(y, axis, -1))
        return np.stack(columns, axis=1)

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Discrete pairing h^dim * sum(a * b) (numpy pairwise summation)."""
        return float(self.cell_volume * np.sum(self.check_field(a) * self.check_field(b)))

    def mean(self, a: np.ndarray) -> float:
        return float(self.cell_volume * np.sum(self.check_field(a)))

    def diff_matrix(self, axis: int, sign: Sign) -> sp.csr_matrix:
        self._check_axis(axis)
        return _diff_matrix(self, axis, _parse_sign(sign))

    def stencil_matrices(self) -> List[sp.csr_matrix]:
        """Sparse matrices S_l with upwind_stencil(y)[:, l] == S_l @ y."""
        return [self.diff_matrix(axis, s) for axis in range(1, self.dim + 1) for s in (1, -1)]

    def laplacian_matrix(self) -> sp.csr_matrix:
        return _laplacian_matrix(self)

    def helmholtz_solve(self, rhs: np.ndarray, repeats: int = 1, rtol: float = 1e-10,
                        max_refinements: int = 3) -> np.ndarray:
        """
        Apply (I - Delta_h)^(-repeats) to ``rhs`` with a cached sparse LU factorization.

        Each stage is polished by iterative refinement until its residual is
        below ``rtol`` relative to its right-hand side.

        Raises:
            ConvergenceError: A stage did not reach ``rtol`` within the refinement cap
        """
        rhs = self.check_field(rhs)
        if int(repeats) != repeats or repeats < 1:
            raise GridError(f"repeats must be a positive integer, got {repeats}")
        operator = _helmholtz_operator(self)
        lu = _helmholtz_factor(self)
        out = rhs
        for _ in range(repeats):
            target = out
            scale = max(np.linalg.norm(target), np.finfo(float).tiny)
            solution = lu.solve(target)
            residual = np.linalg.norm(target - operator @ solution)
            refinements = 0
            while residual > rtol * scale and refinements < max_refinements:
                solution = solution + lu.solve(target - operator @ solution)
                residual = np.linalg.norm(target - operator @ solution)
                refinements += 1
            if residual > rtol * scale:
                raise ConvergenceError("Helmholtz solve did not reach tolerance",
                                       residual=residual / scale)
            out = solution
        return out

    def helmholtz_inverse(self, repeats: int = 1) -> np.ndarray:
        """Dense (I - Delta_h)^(-repeats); used for Jacobians of nonlocal couplings."""
        return _helmholtz_inverse(self, int(repeats))


@functools.lru_cache(maxsize=64)
def _diff_matrix(grid: TorusGrid, axis: int, sign: int) -> sp.csr_matrix:
    n = grid.n_per_axis
    eye = sp.identity(n, format="csr")
    if sign > 0:
        shift = sp.diags([np.ones(n - 1), np.ones(1)], [1, -(n - 1)], shape=(n, n))
        one_d = (shift - eye) / grid.spacing
    else:
        shift = sp.diags([np.ones(n - 1), np.ones(1)], [-1, n - 1], shape=(n, n))
        one_d = (eye - shift) / grid.spacing
    if grid.dim == 1:
        return sp.csr_matrix(one_d)
    if axis == 1:
        return sp.csr_matrix(sp.kron(one_d, eye))
    return sp.csr_matrix(sp.kron(eye, one_d))


@functools.lru_cache(maxsize=16)
def _laplacian_matrix(grid: TorusGrid) -> sp.csr_matrix:
    total = None
    for axis in range(1, grid.dim + 1):
        # D^+ D^- is the three-point second difference along the axis
        term = _diff_matrix(grid, axis, 1) @ _diff_matrix(grid, axis, -1)
        total = term if total is None else total + term
    return sp.csr_matrix(total)


@functools.lru_cache(maxsize=16)
def _helmholtz_operator(grid: TorusGrid) -> sp.csr_matrix:
    return sp.csr_matrix(sp.identity(grid.node_count) - _laplacian_matrix(grid))


@functools.lru_cache(maxsize=16)
def _helmholtz_factor(grid: TorusGrid):
    logger.debug("factorizing I - Laplacian on %s", grid)
    return splu(sp.csc_matrix(_helmholtz_operator(grid)))


@functools.lru_cache(maxsize=8)
def _helmholtz_inverse(grid: TorusGrid, repeats: int) -> np.ndarray:
    single = _helmholtz_factor(grid).solve(np.eye(grid.node_count))
    out = single
    for _ in range(repeats - 1):
        out = single @ out
    out.setflags(write=False)
    return out
