import os

import numpy as np
import pytest

import experiments
from config import config_from_preset
from data_loader import load_run_fields, read_json, read_summary, read_table, scan_runs
from data_processor import l2_error
from exceptions import ConvergenceError, StageError
from experiments import (forward_solve, invert, observation_models, run_experiment, run_forward, run_sweep,
                         synthesize_data)
from presets import get_preset


@pytest.fixture
def small_cfg(tmp_path):
    return config_from_preset("stationary-2d-solver-comparison", n_per_axis=8, m_obs=12, v_obs=20, noise=0.0,
                              max_iter=0, solver="newton", method="gn", out_dir=str(tmp_path / "out"))


@pytest.fixture
def small_td_cfg(tmp_path):
    return config_from_preset("timedep-1d", n_per_axis=8, n_time=4, m_obs=10, v_obs=4,
                              out_dir=str(tmp_path / "out"))


@pytest.fixture
def small_data(small_cfg):
    return synthesize_data(small_cfg)


def test_effective_hamiltonian_observation_counts():
    cfg = config_from_preset("stationary-1d-effective-hamiltonian", n_per_axis=20)
    data = synthesize_data(cfg)
    assert (data.m_obs.n_obs, data.v_obs.n_obs) == (8, 10)
    nodes = data.problem.grid.nodes()[:, 0]
    assert np.isin(data.m_obs.targets[:, 0], nodes).all()
    assert len(np.unique(data.v_obs.targets[:, 0])) == 10
    assert data.reference.trace.converged


def test_noise_free_observations_are_exact(small_data):
    cfg = small_data.config
    W, _, _ = observation_models(cfg, small_data.problem, small_data.m_obs, small_data.v_obs)
    n = small_data.problem.grid.node_count
    np.testing.assert_array_equal(small_data.m_obs.values, W.apply(small_data.reference.z[:n]))
    np.testing.assert_allclose(small_data.v_obs.values,
                               get_preset(cfg.preset).true_potential(small_data.v_obs.targets), rtol=1e-14)


def test_observations_are_deterministic_in_the_seed(small_data):
    again = synthesize_data(small_data.config.with_overrides(noise=1e-3), reference=small_data.reference)
    twice = synthesize_data(small_data.config.with_overrides(noise=1e-3), reference=small_data.reference)
    np.testing.assert_array_equal(again.m_obs.values, twice.m_obs.values)
    np.testing.assert_array_equal(again.v_obs.targets, twice.v_obs.targets)
    other = synthesize_data(small_data.config.with_overrides(noise=1e-3), seed=1, reference=small_data.reference)
    assert not np.array_equal(other.v_obs.targets, again.v_obs.targets)
    # same placement stream as the noise-free draw, values shifted by the noise
    np.testing.assert_array_equal(again.m_obs.targets, small_data.m_obs.targets)
    assert 0 < np.max(np.abs(again.m_obs.values - small_data.m_obs.values)) < 1e-2


def test_time_dependent_targets_use_interior_slices(small_td_cfg):
    data = synthesize_data(small_td_cfg)
    times = data.m_obs.targets[:, -1]
    assert data.m_obs.has_time
    assert data.m_obs.n_obs == 10
    assert set(np.round(times / 0.25).astype(int)) <= {1, 2, 3}
    assert data.reference.fields["m"].shape == (5, 8)


def test_boundary_slices_are_observed_in_full():
    cfg = config_from_preset("timedep-2d", n_per_axis=5, n_time=3, m_obs=10, v_obs=5)
    data = synthesize_data(cfg)
    times = data.m_obs.targets[:, -1]
    assert data.m_obs.n_obs == 25 + 25 + 10
    np.testing.assert_array_equal(times[:25], 0.0)
    np.testing.assert_array_equal(times[25:50], 1.0)
    assert np.all((times[50:] > 0.0) & (times[50:] < 1.0))


def test_zero_outer_iterations_keep_the_initial_guess(small_data):
    run = invert(small_data, "newton", "gn")
    np.testing.assert_array_equal(run.theta, 0.0)
    assert run.trace.n_iter == 0
    assert run.label == "newton-gn"


def test_runs_carry_benchmark_lambda(small_data):
    cfg = config_from_preset("stationary-1d-effective-hamiltonian", n_per_axis=20, max_iter=0)
    run = invert(synthesize_data(cfg), "hrf", "gn")
    assert run.summary_row()["benchmark_lambda"] == pytest.approx(1.70306872525)
    assert invert(small_data, "newton", "gd").summary_row()["benchmark_lambda"] is None


def test_bundle_is_written_and_reproducible(small_cfg):
    bundle = run_experiment(small_cfg)
    out_dir = os.path.join(small_cfg.out_dir, small_cfg.preset)
    assert set(scan_runs(out_dir)) == {"newton-gn"}
    for name in ("config.ini", "summary.json", "reference/m.csv", "reference/trace.csv",
                 "observations/m_obs.csv", "newton-gn/outer_trace.csv", "newton-gn/v_surrogate.csv"):
        assert os.path.exists(os.path.join(out_dir, name)), name

    run_fields = load_run_fields(os.path.join(out_dir, "newton-gn"))
    ref_fields = load_run_fields(os.path.join(out_dir, "reference"))
    summary = read_summary(os.path.join(out_dir, "newton-gn"))
    h = bundle.data.problem.grid.spacing
    for name in ("m", "u", "V"):
        assert l2_error(run_fields[name], ref_fields[name], (h, h)) == pytest.approx(summary[f"{name}_error"],
                                                                                    rel=1e-14)
    top = read_json(os.path.join(out_dir, "summary.json"))
    assert top["bundle_hash"] == bundle.bundle_hash()
    assert top["provenance"]["config_hash"] == small_cfg.config_hash()
    assert run_experiment(small_cfg, write=False).bundle_hash() == bundle.bundle_hash()


def test_comparison_covers_every_solver_and_method(small_cfg):
    cfg = small_cfg.with_overrides(solver="all", method="both", max_iter=1)
    bundle = run_experiment(cfg)
    table = read_table(os.path.join(cfg.out_dir, cfg.preset, "comparison.csv"))
    assert len(table) == 6
    assert sorted(zip(table["solver"], table["method"])) == sorted(
        (s, m) for s in ("hrf", "newton", "policy") for m in ("gd", "gn"))
    assert all(run.trace.n_iter <= 1 for run in bundle.runs)


def test_time_dependent_inversion_runs(small_td_cfg):
    bundle = run_experiment(small_td_cfg.with_overrides(max_iter=2, solver="newton"), write=False)
    run = bundle.runs[0]
    assert run.fields["m"].shape == (5, 8)
    assert run.fields["lambda"] is None
    assert "lambda_error" not in run.errors
    objectives = run.trace.objectives()
    assert objectives[-1] <= objectives[0]


def test_failure_is_tagged_with_its_stage(small_cfg, monkeypatch):
    def failing_invert(*args, **kwargs):
        raise ConvergenceError("inner solve diverged")

    monkeypatch.setattr(experiments, "invert", failing_invert)
    with pytest.raises(StageError) as excinfo:
        run_experiment(small_cfg, write=False)
    assert excinfo.value.stage == "invert"
    assert isinstance(excinfo.value.cause, ConvergenceError)


def test_write_failure_is_tagged(small_cfg, tmp_path):
    blocker = tmp_path / "blocked"
    blocker.write_text("not a directory")
    with pytest.raises(StageError) as excinfo:
        run_experiment(small_cfg.with_overrides(out_dir=str(blocker)))
    assert excinfo.value.stage == "write"


def test_sweep_shares_one_reference_solve(small_cfg, monkeypatch):
    calls = []

    def counting_forward_solve(*args, **kwargs):
        calls.append(args)
        return forward_solve(*args, **kwargs)

    monkeypatch.setattr(experiments, "forward_solve", counting_forward_solve)
    table = run_sweep(small_cfg, [16, 8])
    assert len(calls) == 1
    assert table["m_obs"].tolist() == [8, 16]
    assert os.path.exists(os.path.join(small_cfg.out_dir, small_cfg.preset, "sweep.csv"))


def test_forward_run_writes_trace(small_td_cfg):
    solution = run_forward(small_td_cfg, "hrf")
    assert solution.trace.converged
    out_dir = os.path.join(small_td_cfg.out_dir, "timedep-1d", "forward-hrf")
    assert read_json(os.path.join(out_dir, "summary.json"))["converged"] is True
    assert list(read_table(os.path.join(out_dir, "trace.csv")).columns)[:3] == ["step", "s", "ds"]


@pytest.mark.slow
def test_inner_solvers_give_comparable_recoveries(tmp_path):
    cfg = config_from_preset("stationary-2d-solver-comparison", solver="all", method="both",
                             out_dir=str(tmp_path))
    bundle = run_experiment(cfg)
    table = bundle.comparison()
    assert len(table) == 6
    assert table["m_error"].between(1e-4, 1e-2).all()
