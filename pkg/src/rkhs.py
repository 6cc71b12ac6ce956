"""
Kernels on the torus and on space-time, Gram factorizations, optimal recovery
and the observation maps built from it.

The optimal-recovery interpolant of node samples Z at a point x is
K(x, X) (K(X, X) + jitter I)^(-1) Z. The same factorization supplies the
regularizer J = L^(-1) (K + jitter I = L L^T), so that J^T J = (K + jitter I)^(-1).
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from exceptions import GridError, KernelError
from torus_grid import TorusGrid

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("periodic_gaussian", "torus_matern", "spacetime_product")
MATERN_SMOOTHNESS = (0.5, 1.5, 2.5)
MATERN_IMAGES = 3

KernelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _as_points(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _wrapped_difference(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-axis differences mapped to [-1/2, 1/2], shape (n, m, d)."""
    diff = _as_points(X)[:, None, :] - _as_points(Y)[None, :, :]
    return diff - np.round(diff)


def periodic_gaussian(X: np.ndarray, Y: np.ndarray, lengthscale: float) -> np.ndarray:
    """prod over axes of exp(-2 sin^2(pi d) / l^2) with d the wrapped difference."""
    diff = _wrapped_difference(X, Y)
    return np.exp(-2.0 * np.sum(np.sin(np.pi * diff) ** 2, axis=2) / lengthscale ** 2)


def _matern(r: np.ndarray, smoothness: float, lengthscale: float) -> np.ndarray:
    s = r / lengthscale
    if smoothness == 0.5:
        return np.exp(-s)
    if smoothness == 1.5:
        return (1.0 + np.sqrt(3.0) * s) * np.exp(-np.sqrt(3.0) * s)
    return (1.0 + np.sqrt(5.0) * s + 5.0 * s ** 2 / 3.0) * np.exp(-np.sqrt(5.0) * s)


def torus_matern(X: np.ndarray, Y: np.ndarray, lengthscale: float, smoothness: float) -> np.ndarray:
    """Matern kernel periodized by summing integer images, product over axes."""
    diff = _wrapped_difference(X, Y)
    out = np.ones(diff.shape[:2])
    for axis in range(diff.shape[2]):
        d = diff[:, :, axis]
        out *= sum(_matern(np.abs(d + shift), smoothness, lengthscale)
                   for shift in range(-MATERN_IMAGES, MATERN_IMAGES + 1))
    return out


def gaussian_time(t: np.ndarray, s: np.ndarray, lengthscale: float) -> np.ndarray:
    t = np.asarray(t, dtype=float).ravel()
    s = np.asarray(s, dtype=float).ravel()
    return np.exp(-(t[:, None] - s[None, :]) ** 2 / (2.0 * lengthscale ** 2))


@dataclass(frozen=True)
class KernelSpec:
    """
    Kernel family and hyperparameters.

    Args:
        kind (str): periodic_gaussian, torus_matern or spacetime_product
        lengthscale (float): Spatial lengthscale
        smoothness (float): Matern smoothness, one of 0.5, 1.5, 2.5
        jitter (float): Added to the Gram diagonal
        time_lengthscale (float): Temporal lengthscale as a fraction of the horizon
        spatial_kind (str): Spatial factor of a spacetime_product kernel
    """

    kind: str = "periodic_gaussian"
    lengthscale: float = 0.2
    smoothness: float = 1.5
    jitter: float = 1e-8
    time_lengthscale: float = 0.2
    spatial_kind: str = "periodic_gaussian"

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}, expected one of {KERNEL_KINDS}")
        if self.spatial_kind not in KERNEL_KINDS[:2]:
            raise KernelError(f"spatial factor must be periodic_gaussian or torus_matern, got {self.spatial_kind!r}")
        if self.lengthscale <= 0 or self.time_lengthscale <= 0:
            raise KernelError("lengthscales must be positive")
        if self.jitter < 0:
            raise KernelError(f"jitter must be nonnegative, got {self.jitter}")
        if self.smoothness not in MATERN_SMOOTHNESS:
            raise KernelError(f"Matern smoothness must be one of {MATERN_SMOOTHNESS}, got {self.smoothness}")

    def for_space(self) -> "KernelSpec":
        """The spatial factor as a kernel of its own."""
        if self.kind == "spacetime_product":
            return replace(self, kind=self.spatial_kind)
        return self

    def spatial_kernel(self) -> KernelFn:
        spatial = self.for_space()
        if spatial.kind == "periodic_gaussian":
            return lambda X, Y: periodic_gaussian(X, Y, spatial.lengthscale)
        return lambda X, Y: torus_matern(X, Y, spatial.lengthscale, spatial.smoothness)

    def temporal_kernel(self, horizon: float) -> KernelFn:
        ell = self.time_lengthscale * horizon
        return lambda t, s: gaussian_time(t, s, ell)


class DenseGram:
    """
    Cholesky-factored K(X, X) + jitter I on a fixed node set.

    Args:
        points (np.ndarray): Nodes X, shape (n, d) (or (n,) for 1D)
        kernel (KernelFn): Cross-kernel matrix builder
        jitter (float): Diagonal shift
    """

    def __init__(self, points: np.ndarray, kernel: KernelFn, jitter: float = 1e-8):
        self.points = _as_points(points)
        self.kernel = kernel
        self.jitter = jitter
        gram = kernel(self.points, self.points) + jitter * np.identity(len(self.points))
        self._gram = gram
        try:
            self._factor = cho_factor(gram, lower=True)
        except LinAlgError as e:
            raise KernelError(f"Gram matrix of {len(self.points)} nodes is not positive definite "
                              f"with jitter {jitter:g}: {e}") from e

    @property
    def n_nodes(self) -> int:
        return len(self.points)

    def cross(self, targets: np.ndarray) -> np.ndarray:
        return self.kernel(_as_points(targets), self.points)

    def rows(self, targets: np.ndarray) -> np.ndarray:
        """Optimal-recovery weights, one row per target."""
        return cho_solve(self._factor, self.cross(targets).T).T

    def reconstruct(self, samples: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Evaluate the interpolant of node ``samples`` at ``targets``."""
        return self.cross(targets) @ self.solve(samples)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self._factor, b)

    def norm_sq(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=float)
        return float(values @ self.solve(values))

    def precision_apply(self, theta: np.ndarray) -> np.ndarray:
        """J^T J theta = (K + jitter I)^(-1) theta."""
        return self.solve(theta)

    def sqrt_precision_apply(self, theta: np.ndarray) -> np.ndarray:
        """J theta = L^(-1) theta."""
        return solve_triangular(self._factor[0], theta, lower=True)

    def sqrt_precision_transpose(self, w: np.ndarray) -> np.ndarray:
        return solve_triangular(self._factor[0], w, lower=True, trans="T")

    def kernel_apply(self, v: np.ndarray) -> np.ndarray:
        """(K + jitter I) v."""
        return self._gram @ v


class SpaceTimeGram:
    """
    Tensor-product Gram (K_t + jitter I) kron (K_x + jitter I) on the nodes
    t_0..t_NT times the spatial grid. Samples are stacked slice by slice.
    """

    def __init__(self, space: DenseGram, time: DenseGram):
        self.space = space
        self.time = time

    @property
    def n_nodes(self) -> int:
        return self.space.n_nodes * self.time.n_nodes

    def factor_rows(self, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Temporal and spatial recovery weights of space-time targets (last column is t)."""
        targets = _as_points(targets)
        return self.time.rows(targets[:, -1:]), self.space.rows(targets[:, :-1])

    def rows(self, targets: np.ndarray) -> np.ndarray:
        time_rows, space_rows = self.factor_rows(targets)
        return np.einsum("nt,nx->ntx", time_rows, space_rows).reshape(len(time_rows), -1)

    def solve(self, b: np.ndarray) -> np.ndarray:
        Z = np.asarray(b, dtype=float).reshape(self.time.n_nodes, self.space.n_nodes)
        return self.space.solve(self.time.solve(Z).T).T.ravel()

    def reconstruct(self, samples: np.ndarray, targets: np.ndarray) -> np.ndarray:
        time_rows, space_rows = self.factor_rows(targets)
        Z = np.asarray(samples, dtype=float).reshape(self.time.n_nodes, self.space.n_nodes)
        return np.sum((time_rows @ Z) * space_rows, axis=1)

    def norm_sq(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=float).ravel()
        return float(values @ self.solve(values))


GramModel = Union[DenseGram, SpaceTimeGram]


def spatial_gram(spec: KernelSpec, grid: TorusGrid) -> DenseGram:
    return DenseGram(grid.nodes(), spec.spatial_kernel(), spec.jitter)


def spacetime_gram(spec: KernelSpec, grid: TorusGrid, horizon: float, n_time: int) -> SpaceTimeGram:
    times = np.linspace(0.0, horizon, n_time + 1)
    return SpaceTimeGram(spatial_gram(spec, grid), DenseGram(times, spec.temporal_kernel(horizon), spec.jitter))


def optimal_recovery_row(x_target: np.ndarray, gram: GramModel) -> np.ndarray:
    return gram.rows(np.atleast_2d(np.asarray(x_target, dtype=float)))[0]


def rkhs_norm_sq(V_h: np.ndarray, gram: GramModel) -> float:
    """V^T (K + jitter I)^(-1) V."""
    return gram.norm_sq(V_h)


@dataclass
class ObservationSet:
    """
    Pointwise observations of one field.

    Args:
        field (str): Observed field, "m", "u" or "V"
        targets (np.ndarray): Points, shape (n, dim) or (n, dim + 1) with time last
        values (np.ndarray): Observed values
        sigma (float): Noise standard deviation used to draw the values
        has_time (bool): Whether the last target column is a time
    """

    field: str
    targets: np.ndarray
    values: np.ndarray
    sigma: float = 0.0
    has_time: bool = False

    def __post_init__(self):
        self.targets = _as_points(self.targets).copy()
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.targets) != len(self.values):
            raise GridError(f"{len(self.targets)} targets but {len(self.values)} values")
        n_space = self.targets.shape[1] - (1 if self.has_time else 0)
        self.targets[:, :n_space] = np.mod(self.targets[:, :n_space], 1.0)

    @property
    def n_obs(self) -> int:
        return len(self.values)

    @property
    def spatial_dim(self) -> int:
        return self.targets.shape[1] - (1 if self.has_time else 0)

    def clamped_targets(self, horizon: float) -> np.ndarray:
        """Copy of the targets with times clipped to [0, horizon]."""
        targets = self.targets.copy()
        if self.has_time:
            targets[:, -1] = np.clip(targets[:, -1], 0.0, horizon)
        return targets

    def to_frame(self) -> pd.DataFrame:
        names = ["x", "y"][: self.spatial_dim] + (["t"] if self.has_time else [])
        frame = pd.DataFrame(self.targets, columns=names)
        frame["value"] = self.values
        frame["sigma"] = self.sigma
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, field: str) -> "ObservationSet":
        coords = [c for c in ("x", "y", "t") if c in frame.columns]
        if "value" not in frame.columns or not coords:
            raise GridError(f"observation table needs coordinate and value columns, got {list(frame.columns)}")
        sigma = float(frame["sigma"].iloc[0]) if "sigma" in frame.columns and len(frame) else 0.0
        return cls(field, frame[coords].to_numpy(dtype=float), frame["value"].to_numpy(dtype=float),
                   sigma, has_time="t" in coords)


class DenseObservationMap:
    """Linear map v -> A v for a spatial field."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=float)
        self.offset = np.zeros(self.matrix.shape[0])

    @property
    def n_obs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_unknowns(self) -> int:
        return self.matrix.shape[1]

    def linear(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def linear_transpose(self, w: np.ndarray) -> np.ndarray:
        return self.matrix.T @ w

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.linear(v) + self.offset

    def to_dense(self) -> np.ndarray:
        return self.matrix


class SpaceTimeObservationMap:
    """
    Affine map from interior densities M_1..M_NT to space-time observations.

    The weight of target n on node (k, x) is time_rows[n, k] * space_rows[n, x];
    the contribution of the frozen slice M_0 is folded into ``offset``.
    """

    def __init__(self, time_rows: np.ndarray, space_rows: np.ndarray, initial_slice: np.ndarray):
        self.time_rows = time_rows
        self.space_rows = space_rows
        self.initial_slice = np.asarray(initial_slice, dtype=float)
        self.offset = time_rows[:, 0] * (space_rows @ self.initial_slice)
        self._shape = (time_rows.shape[1] - 1, space_rows.shape[1])

    @property
    def n_obs(self) -> int:
        return self.time_rows.shape[0]

    @property
    def n_unknowns(self) -> int:
        return self._shape[0] * self._shape[1]

    def linear(self, v: np.ndarray) -> np.ndarray:
        Z = np.asarray(v, dtype=float).reshape(self._shape)
        return np.sum((self.time_rows[:, 1:] @ Z) * self.space_rows, axis=1)

    def linear_transpose(self, w: np.ndarray) -> np.ndarray:
        return (self.time_rows[:, 1:].T @ (w[:, None] * self.space_rows)).ravel()

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.linear(v) + self.offset

    def apply_full(self, full_stack: np.ndarray) -> np.ndarray:
        """Evaluate on the complete stack M_0..M_NT without folding."""
        Z = np.asarray(full_stack, dtype=float).reshape(self._shape[0] + 1, self._shape[1])
        return np.sum((self.time_rows @ Z) * self.space_rows, axis=1)

    def to_dense(self) -> np.ndarray:
        return np.einsum("nt,nx->ntx", self.time_rows[:, 1:], self.space_rows).reshape(self.n_obs, -1)


ObservationMap = Union[DenseObservationMap, SpaceTimeObservationMap]


def build_observation_matrix(obs: ObservationSet, gram: GramModel,
                             initial_slice: Optional[np.ndarray] = None,
                             horizon: Optional[float] = None) -> ObservationMap:
    """
    Stack the optimal-recovery rows of every target.

    Space-time observations need the frozen initial slice; its columns become
    the constant offset of the returned affine map.
    """
    if isinstance(gram, SpaceTimeGram):
        if not obs.has_time:
            raise GridError(f"observations of {obs.field} carry no times for a space-time Gram")
        if initial_slice is None:
            raise GridError("space-time observations need the initial density slice")
        targets = obs.targets if horizon is None else obs.clamped_targets(horizon)
        time_rows, space_rows = gram.factor_rows(targets)
        return SpaceTimeObservationMap(time_rows, space_rows, initial_slice)
    if obs.has_time:
        raise GridError(f"observations of {obs.field} carry times but the Gram is spatial")
    return DenseObservationMap(gram.rows(obs.targets))
