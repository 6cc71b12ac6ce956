import numpy as np
import pytest

from conftest import random_density
from exceptions import DomainError
from hrf import FlowConfig
from mfg_models import GodunovQuadratic, MfgProblem, PowerCoupling
from mfg_stationary import (NewtonConfig, PolicyConfig, StationaryState, extended_jacobian, extended_residual,
                            hrf_stationary_solve, lambda_eliminate, newton_stationary_solve,
                            policy_iteration_solve, residual_norm, solve_stationary, stationary_residual)
from presets import get_preset
from torus_grid import TorusGrid


def naive_residual(M, U, V, nu, n, dim):
    """Loop-by-loop stationary residual for g = Godunov |p|^2/2 and f(m) = m."""
    h = 1.0 / n
    shape = (n,) * dim
    Mg, Ug, Vg = M.reshape(shape), U.reshape(shape), V.reshape(shape)
    core = np.zeros(shape)
    flux_f = np.zeros(shape + (dim,))
    flux_b = np.zeros(shape + (dim,))
    for idx in np.ndindex(*shape):
        lap = 0.0
        g = 0.0
        for ax in range(dim):
            up = list(idx)
            dn = list(idx)
            up[ax] = (idx[ax] + 1) % n
            dn[ax] = (idx[ax] - 1) % n
            d_plus = (Ug[tuple(up)] - Ug[idx]) / h
            d_minus = (Ug[idx] - Ug[tuple(dn)]) / h
            lap += (Ug[tuple(up)] - 2 * Ug[idx] + Ug[tuple(dn)]) / h ** 2
            g += 0.5 * (min(d_plus, 0.0) ** 2 + max(d_minus, 0.0) ** 2)
            flux_f[idx + (ax,)] = Mg[idx] * min(d_plus, 0.0)
            flux_b[idx + (ax,)] = Mg[idx] * max(d_minus, 0.0)
        core[idx] = nu * lap - g + Mg[idx] + Vg[idx]
    fp = np.zeros(shape)
    for idx in np.ndindex(*shape):
        lap = 0.0
        div = 0.0
        for ax in range(dim):
            up = list(idx)
            dn = list(idx)
            up[ax] = (idx[ax] + 1) % n
            dn[ax] = (idx[ax] - 1) % n
            lap += (Mg[tuple(up)] - 2 * Mg[idx] + Mg[tuple(dn)]) / h ** 2
            div -= (flux_f[idx + (ax,)] - flux_f[tuple(dn) + (ax,)]) / h
            div -= (flux_b[tuple(up) + (ax,)] - flux_b[idx + (ax,)]) / h
        fp[idx] = -nu * lap + div
    lam = -np.sum(Mg * core) / np.sum(Mg)
    return (core + lam).ravel(), fp.ravel()


@pytest.mark.parametrize("dim,n", [(1, 7), (2, 5)])
def test_residual_matches_naive_oracle(dim, n, rng):
    grid = TorusGrid(dim, n)
    for _ in range(25):
        V = rng.normal(size=grid.node_count)
        nu = rng.uniform(0.0, 0.5)
        problem = MfgProblem(grid, nu, GodunovQuadratic(), PowerCoupling(1.0), V)
        M = random_density(grid, rng)
        U = rng.normal(size=grid.node_count)
        res = stationary_residual(StationaryState(M, U), problem)
        hjb, fp = naive_residual(M, U, V, nu, n, dim)
        scale = 1.0 + np.max(np.abs(hjb))
        np.testing.assert_allclose(res.hjb, hjb, rtol=0, atol=1e-12 * scale)
        np.testing.assert_allclose(res.fp, fp, rtol=0, atol=1e-12 * (1.0 + np.max(np.abs(fp))))


def test_uniform_state_solves_constant_potential():
    grid = TorusGrid(2, 4)
    problem = MfgProblem(grid, 0.3, GodunovQuadratic(), PowerCoupling(1.0), np.full(16, 2.0))
    state = StationaryState.uniform(grid)
    assert residual_norm(state.M, state.U, problem) < 1e-14
    # f(1) + V + lambda = 0
    assert lambda_eliminate(state.M, state.U, problem.potential, problem) == pytest.approx(-3.0)


def test_lambda_needs_mass(stationary_1d):
    with pytest.raises(DomainError):
        lambda_eliminate(np.zeros(16), np.zeros(16), stationary_1d.potential, stationary_1d)


def test_extended_jacobian_matches_finite_differences(stationary_2d, rng):
    problem = stationary_2d.with_hamiltonian(GodunovQuadratic(smoothing=0.05))
    n = problem.grid.node_count
    M = random_density(problem.grid, rng)
    U = rng.normal(scale=0.2, size=n)
    lam = 0.3
    jac = extended_jacobian(problem, M, U).toarray()
    assert jac.shape == (2 * n + 1, 2 * n + 1)
    z = np.concatenate([M, U, [lam]])
    step = 1e-6
    for _ in range(5):
        dz = rng.normal(size=2 * n + 1)
        plus, minus = z + step * dz, z - step * dz
        fd = (extended_residual(problem, plus[:n], plus[n:2 * n], plus[-1])
              - extended_residual(problem, minus[:n], minus[n:2 * n], minus[-1])) / (2 * step)
        np.testing.assert_allclose(jac @ dz, fd, rtol=1e-5, atol=1e-5)


@pytest.fixture
def hrf_reference(stationary_1d):
    state, trace = hrf_stationary_solve(stationary_1d)
    assert trace.converged
    return state


def test_hrf_converges_from_cold_start(stationary_1d, hrf_reference):
    state = hrf_reference
    assert residual_norm(state.M, state.U, stationary_1d) < 1e-9
    assert stationary_1d.grid.mean(state.M) == pytest.approx(1.0, abs=1e-12)
    assert abs(stationary_1d.grid.mean(state.U)) < 1e-12
    assert np.min(state.M) > 0


def test_hrf_trace_records_feasible_steps(stationary_1d):
    _, trace = hrf_stationary_solve(stationary_1d, flow_cfg=FlowConfig(tol=1e-8))
    frame = trace.to_frame()
    assert list(frame.columns) == ["step", "residual_norm", "lambda", "min_density", "step_size"]
    assert (frame["min_density"] > 0).all()
    assert frame["residual_norm"].iloc[-1] < 1e-8


def test_explicit_flow_agrees_with_implicit(stationary_1d, hrf_reference):
    state, trace = hrf_stationary_solve(stationary_1d, flow_cfg=FlowConfig(tol=1e-8, scheme="explicit",
                                                                          max_steps=20000))
    assert trace.converged
    np.testing.assert_allclose(state.M, hrf_reference.M, atol=1e-6)
    assert state.lam == pytest.approx(hrf_reference.lam, abs=1e-6)


def test_newton_agrees_with_hrf(stationary_1d, hrf_reference):
    state, trace = newton_stationary_solve(stationary_1d)
    assert trace.converged
    np.testing.assert_allclose(state.M, hrf_reference.M, atol=1e-7)
    np.testing.assert_allclose(state.U, hrf_reference.U, atol=1e-7)
    assert state.lam == pytest.approx(hrf_reference.lam, abs=1e-8)


def test_policy_iteration_agrees_with_hrf(stationary_1d, hrf_reference):
    state, trace = policy_iteration_solve(stationary_1d)
    assert trace.converged
    np.testing.assert_allclose(state.M, hrf_reference.M, atol=1e-7)
    assert state.lam == pytest.approx(hrf_reference.lam, abs=1e-8)


def test_solvers_agree_in_2d(stationary_2d):
    states = {name: solve_stationary(stationary_2d, name)[0] for name in ("hrf", "newton", "policy")}
    for name in ("newton", "policy"):
        np.testing.assert_allclose(states[name].M, states["hrf"].M, atol=1e-7)
        assert states[name].lam == pytest.approx(states["hrf"].lam, abs=1e-8)


def test_dispatch_overrides_tolerance(stationary_1d):
    _, trace = solve_stationary(stationary_1d, "newton", tol=1e-4)
    assert trace.converged
    assert trace.final_residual < 1e-4
    with pytest.raises(ValueError):
        solve_stationary(stationary_1d, "multigrid")


def test_policy_relaxation_validated(stationary_1d):
    with pytest.raises(ValueError):
        policy_iteration_solve(stationary_1d, cfg=PolicyConfig(relaxation=1.5))


def test_newton_with_smoothing_reports_original_residual(stationary_1d, hrf_reference):
    cfg = NewtonConfig(smoothing=1e-3, tol=1e-9)
    state, trace = newton_stationary_solve(stationary_1d, cfg=cfg)
    assert trace.converged
    assert stationary_residual(state, stationary_1d).sup_norm() <= cfg.tol
    assert trace.final_residual <= cfg.tol
    assert state.lam == pytest.approx(lambda_eliminate(state.M, state.U, stationary_1d.potential, stationary_1d))
    np.testing.assert_allclose(state.M, hrf_reference.M, atol=1e-6)


def test_stationary_solvers_reject_time_dependent(timedep_1d):
    with pytest.raises(ValueError):
        hrf_stationary_solve(timedep_1d)


def test_nonconverged_solve_returns_state_with_flag(stationary_1d):
    state, trace = newton_stationary_solve(stationary_1d, cfg=NewtonConfig(max_iter=1))
    assert not trace.converged
    assert trace.message
    assert np.min(state.M) > 0


@pytest.mark.slow
@pytest.mark.parametrize("name,tolerance", [
    ("stationary-1d-effective-hamiltonian", 1e-3),
    ("stationary-2d-congestion", 5e-3),
    ("stationary-2d-nonpotential", 5e-3),
    ("stationary-2d-nonlocal", 5e-3),
])
def test_reference_lambda_reproduced(name, tolerance):
    preset = get_preset(name)
    state, trace = hrf_stationary_solve(preset.build_problem())
    assert trace.converged
    assert state.lam == pytest.approx(preset.reference_lambda, abs=tolerance)
