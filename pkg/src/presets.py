"""
Catalog of the benchmark experiments: forward problems, observation layouts
and inversion weights.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from exceptions import ConfigError
from mfg_models import (CongestionHamiltonian, CubicCoupling, DriftCoupling, GodunovQuadratic, LogCoupling,
                        MfgProblem, NonlocalCoupling)
from torus_grid import TorusGrid

logger = logging.getLogger(__name__)

NOISE_LEVEL = 1e-3


def _effective_hamiltonian_potential(x):
    return 0.5 * (np.sin(np.pi * x) + np.sin(4 * np.pi * x))


def _congestion_potential(x, y):
    return 2.0 * np.sin(2 * np.pi * (x + 0.25)) * np.cos(2 * np.pi * (y + 0.25))


def _mixed_trig_potential(x, y):
    return -(np.sin(2 * np.pi * x) + np.cos(4 * np.pi * x) + np.sin(2 * np.pi * y))


def _rotating_drift(x, y):
    return -np.sin(2 * np.pi * y), np.sin(2 * np.pi * x)


def _solver_comparison_potential(x, y):
    return np.sin(2 * np.pi * x) + np.cos(2 * np.pi * x) + np.sin(4 * np.pi * y)


def _timedep_1d_potential(x):
    return np.sin(2 * np.pi * x) + np.cos(4 * np.pi * x)


def _timedep_2d_potential(x, y):
    return np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)


def _gaussian_bump(x, y):
    return np.exp(-8.0 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))


def _ones(*coords):
    return np.ones_like(coords[0])


def _zeros(*coords):
    return np.zeros_like(coords[0])


@dataclass(frozen=True)
class Preset:
    """
    One benchmark: the forward problem plus the inversion setup.

    ``placement`` is "grid" (observations on a seeded subset of grid nodes) or
    "random" (uniform draws on the torus). Time-dependent presets observe m on
    space-time grid nodes of the interior slices; with
    ``observe_boundary_slices`` the slices t = 0 and t = T are observed in full
    on top of ``m_obs``.
    """

    name: str
    title: str
    dim: int
    n_per_axis: int
    viscosity: float
    hamiltonian: Callable
    coupling: Callable
    potential: Callable
    m_obs: int
    v_obs: int
    placement: str
    alpha: float
    beta: float
    gamma: float
    noise: float = NOISE_LEVEL
    n_time: Optional[int] = None
    horizon: Optional[float] = None
    initial_density: Optional[Callable] = None
    terminal_value: Optional[Callable] = None
    terminal_from_initial: Optional[float] = None
    observe_boundary_slices: bool = False
    reference_lambda: Optional[float] = None
    recovered_lambda: Dict[str, float] = field(default_factory=dict)
    gd_metric: str = "euclidean"
    solvers: Tuple[str, ...] = ("hrf",)

    @property
    def is_time_dependent(self) -> bool:
        return self.n_time is not None

    def grid(self, n_per_axis: Optional[int] = None) -> TorusGrid:
        return TorusGrid(self.dim, n_per_axis or self.n_per_axis)

    def build_problem(self, n_per_axis: Optional[int] = None, n_time: Optional[int] = None,
                      potential: Optional[np.ndarray] = None) -> MfgProblem:
        """Forward problem, optionally on a coarser grid; ``potential`` replaces the true V."""
        grid = self.grid(n_per_axis)
        V = grid.sample(self.potential) if potential is None else potential
        kwargs = {}
        if self.is_time_dependent:
            m0 = grid.sample(self.initial_density)
            m0 = m0 / grid.mean(m0)
            if self.terminal_from_initial is not None:
                terminal = self.terminal_from_initial * m0
            else:
                terminal = grid.sample(self.terminal_value)
            kwargs = dict(horizon=self.horizon, n_time=n_time or self.n_time,
                          initial_density=m0, terminal_value=terminal)
        return MfgProblem(grid, self.viscosity, self.hamiltonian(), self.coupling(), V, name=self.name, **kwargs)

    def true_potential(self, points: np.ndarray) -> np.ndarray:
        """Evaluate V at arbitrary spatial points of shape (n, dim)."""
        points = np.atleast_2d(points)
        return np.asarray(self.potential(*points.T), dtype=float)


_PRESETS: List[Preset] = [
    Preset(
        name="stationary-1d-effective-hamiltonian",
        title="1D first-order MFG with shifted quadratic Hamiltonian and log coupling",
        dim=1, n_per_axis=100, viscosity=0.0,
        hamiltonian=lambda: GodunovQuadratic(shift=[2.0]),
        coupling=lambda: LogCoupling(k=100.0),
        potential=_effective_hamiltonian_potential,
        m_obs=8, v_obs=10, placement="grid",
        alpha=0.002, beta=2.0, gamma=2.0,
        reference_lambda=1.70043070502,
        recovered_lambda={"gd": 1.70352563486, "gn": 1.70306872525},
    ),
    Preset(
        name="stationary-2d-congestion",
        title="2D first-order MFG with congestion Hamiltonian and cubic coupling",
        dim=2, n_per_axis=40, viscosity=0.0,
        hamiltonian=lambda: CongestionHamiltonian(a=1.5, b=2.0, shift=[1.0, 3.0]),
        coupling=lambda: CubicCoupling(),
        potential=_congestion_potential,
        m_obs=128, v_obs=320, placement="random",
        alpha=0.04, beta=2.0, gamma=2.0,
        reference_lambda=4.04456433468,
        gd_metric="kernel",
    ),
    Preset(
        name="stationary-2d-nonpotential",
        title="2D second-order MFG with a non-potential drift coupling",
        dim=2, n_per_axis=30, viscosity=0.1,
        hamiltonian=lambda: GodunovQuadratic(),
        coupling=lambda: DriftCoupling(drift=_rotating_drift, exponent=2.0),
        potential=_mixed_trig_potential,
        m_obs=72, v_obs=180, placement="random",
        alpha=0.04, beta=1.0, gamma=1.0,
        reference_lambda=-0.538470584730,
        gd_metric="kernel",
    ),
    Preset(
        name="stationary-2d-solver-comparison",
        title="2D second-order MFG with smoothing coupling, solved by three inner solvers",
        dim=2, n_per_axis=30, viscosity=0.2,
        hamiltonian=lambda: GodunovQuadratic(),
        coupling=lambda: NonlocalCoupling(scale=50.0, repeats=2),
        potential=_solver_comparison_potential,
        m_obs=72, v_obs=180, placement="random",
        alpha=0.04, beta=2.0, gamma=2.0,
        gd_metric="kernel",
        solvers=("hrf", "newton", "policy"),
    ),
    Preset(
        name="timedep-1d",
        title="1D time-dependent MFG with smoothing coupling",
        dim=1, n_per_axis=40, viscosity=0.1,
        hamiltonian=lambda: GodunovQuadratic(),
        coupling=lambda: NonlocalCoupling(scale=1.0, repeats=2),
        potential=_timedep_1d_potential,
        m_obs=96, v_obs=10, placement="grid",
        alpha=0.04, beta=2.0, gamma=2.0,
        n_time=40, horizon=1.0,
        initial_density=_ones, terminal_value=_zeros,
        gd_metric="kernel",
    ),
    Preset(
        name="timedep-2d",
        title="2D time-dependent MFG from a Gaussian crowd with cubic coupling",
        dim=2, n_per_axis=25, viscosity=0.05,
        hamiltonian=lambda: GodunovQuadratic(),
        coupling=lambda: CubicCoupling(),
        potential=_timedep_2d_potential,
        m_obs=1250, v_obs=125, placement="grid",
        alpha=0.04, beta=2.0, gamma=2.0,
        n_time=25, horizon=1.0,
        initial_density=_gaussian_bump, terminal_from_initial=-1.0,
        observe_boundary_slices=True,
        gd_metric="kernel",
    ),
    Preset(
        name="stationary-2d-nonlocal",
        title="2D second-order MFG with a strong nonlocal smoothing coupling",
        dim=2, n_per_axis=30, viscosity=0.1,
        hamiltonian=lambda: GodunovQuadratic(),
        coupling=lambda: NonlocalCoupling(scale=200.0, repeats=2),
        potential=_mixed_trig_potential,
        m_obs=72, v_obs=180, placement="random",
        alpha=0.04, beta=2.0, gamma=2.0,
        reference_lambda=-199.371945105,
        recovered_lambda={"gd": -199.374759680, "gn": -199.374714534},
        gd_metric="kernel",
    ),
]


def preset_catalog() -> List[Preset]:
    return list(_PRESETS)


def preset_names() -> List[str]:
    return [p.name for p in _PRESETS]


def get_preset(name: str) -> Preset:
    for preset in _PRESETS:
        if preset.name == name:
            return preset
    raise ConfigError(f"unknown preset {name!r}; known presets: {', '.join(preset_names())}")
