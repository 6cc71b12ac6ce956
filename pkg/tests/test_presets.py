import numpy as np
import pytest

from exceptions import ConfigError
from mfg_models import CongestionHamiltonian, DriftCoupling, LogCoupling, NonlocalCoupling
from mfg_stationary import solve_stationary
from presets import get_preset, preset_catalog, preset_names

# name, dim, N, nu, m_obs, v_obs, placement, alpha, beta, gamma
EXPECTED = [
    ("stationary-1d-effective-hamiltonian", 1, 100, 0.0, 8, 10, "grid", 0.002, 2.0, 2.0),
    ("stationary-2d-congestion", 2, 40, 0.0, 128, 320, "random", 0.04, 2.0, 2.0),
    ("stationary-2d-nonpotential", 2, 30, 0.1, 72, 180, "random", 0.04, 1.0, 1.0),
    ("stationary-2d-solver-comparison", 2, 30, 0.2, 72, 180, "random", 0.04, 2.0, 2.0),
    ("timedep-1d", 1, 40, 0.1, 96, 10, "grid", 0.04, 2.0, 2.0),
    ("timedep-2d", 2, 25, 0.05, 1250, 125, "grid", 0.04, 2.0, 2.0),
    ("stationary-2d-nonlocal", 2, 30, 0.1, 72, 180, "random", 0.04, 2.0, 2.0),
]


def test_catalog_lists_presets_in_order():
    assert preset_names() == [row[0] for row in EXPECTED]
    assert len(preset_catalog()) == 7


@pytest.mark.parametrize("row", EXPECTED, ids=[row[0] for row in EXPECTED])
def test_preset_constants(row):
    name, dim, n, nu, m_obs, v_obs, placement, alpha, beta, gamma = row
    preset = get_preset(name)
    assert (preset.dim, preset.n_per_axis, preset.viscosity) == (dim, n, nu)
    assert (preset.m_obs, preset.v_obs, preset.placement) == (m_obs, v_obs, placement)
    assert (preset.alpha, preset.beta, preset.gamma) == (alpha, beta, gamma)
    assert preset.noise == 1e-3


def test_effective_hamiltonian_problem():
    preset = get_preset("stationary-1d-effective-hamiltonian")
    problem = preset.build_problem()
    assert problem.grid.spacing == pytest.approx(1 / 100)
    assert isinstance(problem.coupling, LogCoupling)
    assert problem.hamiltonian.kind == "shifted_quadratic"
    assert preset.reference_lambda == pytest.approx(1.70043070502)
    assert not problem.is_time_dependent


def test_stationary_two_dimensional_problems():
    congestion = get_preset("stationary-2d-congestion").build_problem()
    assert isinstance(congestion.hamiltonian, CongestionHamiltonian)
    assert congestion.grid.node_count == 1600
    nonpotential = get_preset("stationary-2d-nonpotential").build_problem()
    assert isinstance(nonpotential.coupling, DriftCoupling)
    comparison = get_preset("stationary-2d-solver-comparison")
    assert comparison.solvers == ("hrf", "newton", "policy")
    assert isinstance(comparison.build_problem(n_per_axis=10).coupling, NonlocalCoupling)


def test_timedep_1d_problem():
    problem = get_preset("timedep-1d").build_problem()
    assert problem.n_time == 40
    assert problem.time_step == pytest.approx(1 / 40)
    np.testing.assert_allclose(problem.initial_density, 1.0)
    np.testing.assert_allclose(problem.terminal_value, 0.0)


def test_timedep_2d_terminal_cost_is_negative_initial_density():
    preset = get_preset("timedep-2d")
    problem = preset.build_problem()
    assert problem.grid.shape == (25, 25)
    assert problem.n_time == 25
    assert problem.grid.mean(problem.initial_density) == pytest.approx(1.0)
    np.testing.assert_allclose(problem.terminal_value, -problem.initial_density)
    assert preset.observe_boundary_slices


def test_nonlocal_preset_solves_on_a_coarse_grid():
    preset = get_preset("stationary-2d-nonlocal")
    problem = preset.build_problem(n_per_axis=10)
    coupling = problem.coupling
    assert isinstance(coupling, NonlocalCoupling)
    assert (coupling.scale, coupling.repeats) == (200.0, 2)
    nonpotential = get_preset("stationary-2d-nonpotential").build_problem(n_per_axis=10)
    np.testing.assert_allclose(problem.potential, nonpotential.potential)
    state, trace = solve_stationary(problem, "newton", tol=1e-9)
    assert trace.converged
    assert state.lam == pytest.approx(preset.reference_lambda, abs=1.5)
    assert preset.recovered_lambda == {"gd": -199.374759680, "gn": -199.374714534}


def test_build_problem_on_coarser_grid():
    problem = get_preset("timedep-1d").build_problem(n_per_axis=10, n_time=5)
    assert problem.grid.node_count == 10
    assert problem.n_time == 5
    V = np.zeros(10)
    assert not np.any(get_preset("timedep-1d").build_problem(n_per_axis=10, potential=V).potential)


def test_true_potential_matches_grid_samples():
    preset = get_preset("stationary-2d-congestion")
    grid = preset.grid(8)
    np.testing.assert_allclose(preset.true_potential(grid.nodes()), grid.sample(preset.potential))
    # 2 sin(2 pi (x + 1/4)) cos(2 pi (y + 1/4)) at the origin
    assert preset.true_potential(np.array([0.0, 0.0]))[0] == pytest.approx(0.0, abs=1e-14)


def test_unknown_preset_raises():
    with pytest.raises(ConfigError) as excinfo:
        get_preset("timedep-3d")
    assert "timedep-1d" in str(excinfo.value)
