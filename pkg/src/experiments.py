"""
Synthetic-data generation and the staged experiment runner.

A run goes through four stages: synthesize (reference solve and noisy
observations), invert (one outer loop per inner solver and method), evaluate
(errors against the reference) and write (CSV fields, traces, summary.json).
Any failure is re-raised as a StageError naming the stage.
"""
import hashlib
import json
import logging
import os
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy

from config import ExperimentConfig, config_from_preset, write_config_file
from data_loader import write_field, write_json, write_observations, write_table
from data_processor import consolidate_runs, field_errors, sweep_table
from exceptions import StageError
from hrf import ConvergenceTrace
from inverse import (EquilibriumConstraint, OuterConfig, OuterTrace, ReducedObjective, StationaryConstraint,
                     TimeDependentConstraint, run_outer)
from mfg_models import MfgProblem
from presets import Preset, get_preset
from rkhs import (DenseGram, DenseObservationMap, GramModel, ObservationMap, ObservationSet,
                  build_observation_matrix, spacetime_gram, spatial_gram)

logger = logging.getLogger(__name__)

REFERENCE_SOLVER = "hrf"


@contextmanager
def _stage(name: str):
    logger.info("Stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


@dataclass
class ReferenceSolution:
    problem: MfgProblem
    z: np.ndarray
    fields: Dict[str, object]
    trace: ConvergenceTrace


@dataclass
class SyntheticData:
    """Reference solution of the true problem plus the noisy observations drawn from it."""

    config: ExperimentConfig
    preset: Preset
    reference: ReferenceSolution
    m_obs: ObservationSet
    v_obs: ObservationSet

    @property
    def problem(self) -> MfgProblem:
        return self.reference.problem

    @property
    def is_time_dependent(self) -> bool:
        return self.problem.is_time_dependent


def _constraint(problem: MfgProblem, solver: str, tol: Optional[float]) -> EquilibriumConstraint:
    if problem.is_time_dependent:
        return TimeDependentConstraint(problem, solver, tol)
    return StationaryConstraint(problem, solver, tol)


def forward_solve(problem: MfgProblem, solver: str = REFERENCE_SOLVER,
                  tol: Optional[float] = None) -> ReferenceSolution:
    """
    Solve the forward problem on its own potential.

    Raises:
        ConvergenceError: The inner solver did not reach its tolerance
    """
    constraint = _constraint(problem, solver, tol)
    z, trace = constraint.solve(problem.potential)
    fields = dict(constraint.unpack(z))
    fields["V"] = problem.potential.copy()
    lam = fields.get("lambda")
    if lam is not None:
        logger.info("Forward solve of %s with %s: lambda = %.11f", problem.name, solver, lam)
    return ReferenceSolution(problem, z, fields, trace)


def observation_models(cfg: ExperimentConfig, problem: MfgProblem, m_obs: ObservationSet,
                       v_obs: ObservationSet) -> Tuple[ObservationMap, DenseObservationMap, DenseGram]:
    """Density observation map W, potential observation map G and the spatial Gram of V."""
    spec = cfg.kernel_spec()
    v_gram = spatial_gram(spec, problem.grid)
    m_gram: GramModel = v_gram
    initial_slice = None
    if problem.is_time_dependent:
        m_gram = spacetime_gram(spec, problem.grid, problem.horizon, problem.n_time)
        initial_slice = problem.initial_density
    W = build_observation_matrix(m_obs, m_gram, initial_slice=initial_slice, horizon=problem.horizon)
    G = build_observation_matrix(v_obs, v_gram)
    return W, G, v_gram


def _spatial_targets(rng: np.random.Generator, nodes: np.ndarray, count: int, placement: str) -> np.ndarray:
    if placement == "grid":
        return nodes[np.sort(rng.choice(len(nodes), size=count, replace=False))]
    return rng.uniform(0.0, 1.0, size=(count, nodes.shape[1]))


def _spacetime_targets(rng: np.random.Generator, problem: MfgProblem, count: int, placement: str,
                       boundary_slices: bool) -> np.ndarray:
    """
    Targets (x, t) of density observations: ``count`` draws on the interior
    slices 1..N_T-1, preceded by every node of the slices t = 0 and t = T when
    ``boundary_slices`` is set.
    """
    nodes = problem.grid.nodes()
    n = problem.grid.node_count
    dt = problem.time_step
    if placement == "grid":
        flat = np.sort(rng.choice((problem.n_time - 1) * n, size=count, replace=False))
        targets = np.column_stack([nodes[flat % n], (1 + flat // n) * dt])
    else:
        targets = np.column_stack([rng.uniform(0.0, 1.0, size=(count, nodes.shape[1])),
                                   rng.uniform(0.0, problem.horizon, size=count)])
    if boundary_slices:
        edges = [np.column_stack([nodes, np.full(n, t)]) for t in (0.0, problem.horizon)]
        targets = np.vstack(edges + [targets])
    return targets


def synthesize_data(source: Union[ExperimentConfig, Preset, str], seed: Optional[int] = None,
                    reference: Optional[ReferenceSolution] = None) -> SyntheticData:
    """
    Solve the true forward problem and draw noisy observations of m and V.

    Deterministic given (config, seed): placement and noise both come from
    ``np.random.default_rng(seed)``.

    Args:
        source (ExperimentConfig, Preset or str): Configuration, or a preset taken with its defaults
        seed (int): Overrides the configured seed
        reference (ReferenceSolution): Reuse an earlier forward solve of the same problem
    """
    cfg = source if isinstance(source, ExperimentConfig) else config_from_preset(source)
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    preset = get_preset(cfg.preset)
    if reference is None:
        problem = preset.build_problem(cfg.n_per_axis, cfg.n_time)
        reference = forward_solve(problem, REFERENCE_SOLVER, cfg.tol)
    problem = reference.problem

    rng = np.random.default_rng(cfg.seed)
    nodes = problem.grid.nodes()
    if problem.is_time_dependent:
        m_targets = _spacetime_targets(rng, problem, cfg.m_obs, cfg.placement, preset.observe_boundary_slices)
    else:
        m_targets = _spatial_targets(rng, nodes, cfg.m_obs, cfg.placement)
    v_targets = _spatial_targets(rng, nodes, cfg.v_obs, cfg.placement)

    m_obs = ObservationSet("m", m_targets, np.zeros(len(m_targets)), cfg.noise,
                           has_time=problem.is_time_dependent)
    v_obs = ObservationSet("V", v_targets, preset.true_potential(v_targets), cfg.noise)
    W, _, _ = observation_models(cfg, problem, m_obs, v_obs)
    n_unknown = W.n_unknowns
    m_obs.values = W.apply(reference.z[:n_unknown])
    if cfg.noise > 0:
        m_obs.values = m_obs.values + rng.normal(0.0, cfg.noise, size=m_obs.n_obs)
        v_obs.values = v_obs.values + rng.normal(0.0, cfg.noise, size=v_obs.n_obs)
    logger.info("Synthesized %d density and %d potential observations for %s (seed %d)",
                m_obs.n_obs, v_obs.n_obs, preset.name, cfg.seed)
    return SyntheticData(cfg, preset, reference, m_obs, v_obs)


def build_objective(data: SyntheticData, solver: str) -> ReducedObjective:
    cfg = data.config
    W, G, v_gram = observation_models(cfg, data.problem, data.m_obs, data.v_obs)
    constraint = _constraint(data.problem, solver, cfg.tol)
    return ReducedObjective(constraint, W, data.m_obs.values, G, data.v_obs.values, v_gram,
                            cfg.alpha, cfg.beta, cfg.gamma)


@dataclass
class RunResult:
    solver: str
    method: str
    theta: np.ndarray
    fields: Dict[str, object]
    trace: OuterTrace
    inner_solves: int
    v_surrogate: np.ndarray
    errors: Dict[str, float] = field(default_factory=dict)
    benchmark_lambda: Optional[float] = None

    @property
    def label(self) -> str:
        return f"{self.solver}-{self.method}"

    def summary_row(self) -> Dict[str, object]:
        seconds = self.trace.rows[-1]["seconds"] if self.trace.rows else 0.0
        objective = self.trace.rows[-1]["objective"] if self.trace.rows else float("nan")
        return {"solver": self.solver, "method": self.method, **self.errors,
                "lambda": self.fields.get("lambda"), "benchmark_lambda": self.benchmark_lambda,
                "outer_iters": self.trace.n_iter,
                "inner_solves": self.inner_solves, "objective": objective,
                "converged": self.trace.converged, "seconds": seconds}


@dataclass
class ResultBundle:
    """Recovered and reference fields, errors, traces and provenance of one experiment."""

    config: ExperimentConfig
    data: SyntheticData
    runs: List[RunResult]
    provenance: Dict[str, object]

    @property
    def reference(self) -> Dict[str, object]:
        return self.data.reference.fields

    def comparison(self) -> pd.DataFrame:
        return consolidate_runs(run.summary_row() for run in self.runs)

    def bundle_hash(self) -> str:
        """SHA-256 over recovered fields, errors and the config hash; wall-clock times excluded."""
        digest = hashlib.sha256(self.config.config_hash().encode("utf-8"))
        for run in self.runs:
            digest.update(run.label.encode("utf-8"))
            for name in ("m", "u"):
                digest.update(np.ascontiguousarray(run.fields[name], dtype=float).tobytes())
            digest.update(np.ascontiguousarray(run.theta, dtype=float).tobytes())
            digest.update(repr(run.fields.get("lambda")).encode("utf-8"))
            digest.update(json.dumps(run.errors, sort_keys=True).encode("utf-8"))
        return digest.hexdigest()


def field_spacings(problem: MfgProblem) -> Dict[str, Tuple[float, ...]]:
    space = (problem.grid.spacing,) * problem.grid.dim
    if problem.is_time_dependent:
        return {"m": space + (problem.time_step,), "u": space + (problem.time_step,), "V": space}
    return {"m": space, "u": space, "V": space}


def evaluate_run(run: RunResult, data: SyntheticData) -> Dict[str, float]:
    recovered = {"m": run.fields["m"], "u": run.fields["u"], "V": run.theta, "lambda": run.fields.get("lambda")}
    run.errors = field_errors(recovered, data.reference.fields, field_spacings(data.problem))
    return run.errors


def invert(data: SyntheticData, solver: str, method: str,
           theta_init: Optional[np.ndarray] = None) -> RunResult:
    """One outer loop recovering V from the synthesized observations."""
    cfg = data.config
    objective = build_objective(data, solver)
    theta0 = np.zeros(objective.n_theta) if theta_init is None else np.asarray(theta_init, dtype=float)
    outer_cfg = OuterConfig(max_iter=cfg.max_iter, tol=cfg.outer_tol, gd_metric=cfg.gd_metric)
    result = run_outer(objective, method, theta0, outer_cfg)
    v_gram = objective.regularizer
    surrogate = v_gram.reconstruct(result.theta, data.v_obs.targets)
    logger.info("Inversion %s-%s of %s finished after %d outer iterations (%d inner solves)",
                solver, method, data.preset.name, result.trace.n_iter, objective.inner_solves)
    return RunResult(solver, method, result.theta, result.fields, result.trace, objective.inner_solves, surrogate,
                     benchmark_lambda=data.preset.recovered_lambda.get(method))


def _provenance(cfg: ExperimentConfig) -> Dict[str, object]:
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": {"numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__,
                     "python": platform.python_version()},
    }


def experiment_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, cfg.preset)


def write_reference(data: SyntheticData, out_dir: str) -> None:
    """Reference fields, the reference solve trace and the observation tables."""
    problem = data.problem
    n_time = problem.n_time or 0
    horizon = problem.horizon or 0.0
    ref_dir = os.path.join(out_dir, "reference")
    for name in ("m", "u"):
        write_field(os.path.join(ref_dir, f"{name}.csv"), name, data.reference.fields[name], problem.grid,
                    n_time, horizon)
    write_field(os.path.join(ref_dir, "V.csv"), "V", data.reference.fields["V"], problem.grid)
    write_table(data.reference.trace.to_frame(), os.path.join(ref_dir, "trace.csv"))
    write_observations(data.m_obs, os.path.join(out_dir, "observations", "m_obs.csv"))
    write_observations(data.v_obs, os.path.join(out_dir, "observations", "v_obs.csv"))


def write_bundle(bundle: ResultBundle, out_dir: Optional[str] = None) -> str:
    """
    Write every artifact of a bundle below ``out_dir`` (default <out_dir>/<preset>).

    Returns:
        str: The experiment directory
    """
    cfg = bundle.config
    out_dir = out_dir or experiment_dir(cfg)
    problem = bundle.data.problem
    n_time = problem.n_time or 0
    horizon = problem.horizon or 0.0
    os.makedirs(out_dir, exist_ok=True)
    write_config_file(cfg, os.path.join(out_dir, "config.ini"))
    write_reference(bundle.data, out_dir)

    for run in bundle.runs:
        run_dir = os.path.join(out_dir, run.label)
        for name in ("m", "u"):
            write_field(os.path.join(run_dir, f"{name}.csv"), name, run.fields[name], problem.grid,
                        n_time, horizon)
        write_field(os.path.join(run_dir, "V.csv"), "V", run.theta, problem.grid)
        write_table(run.trace.to_frame(), os.path.join(run_dir, "outer_trace.csv"))
        surrogate = bundle.data.v_obs.to_frame().drop(columns=["value", "sigma"])
        surrogate["V_recovered"] = run.v_surrogate
        write_table(surrogate, os.path.join(run_dir, "v_surrogate.csv"))
        write_json({**run.summary_row(), "message": run.trace.message}, os.path.join(run_dir, "summary.json"))

    if len(bundle.runs) > 1:
        write_table(bundle.comparison(), os.path.join(out_dir, "comparison.csv"))
    write_json({
        "preset": cfg.preset,
        "reference_lambda": bundle.reference.get("lambda"),
        "benchmark_reference_lambda": bundle.data.preset.reference_lambda,
        "reference_steps": bundle.data.reference.trace.n_steps,
        "runs": [run.summary_row() for run in bundle.runs],
        "bundle_hash": bundle.bundle_hash(),
        "provenance": bundle.provenance,
    }, os.path.join(out_dir, "summary.json"))
    logger.info("Wrote results to %s", out_dir)
    return out_dir


def run_experiment(cfg: ExperimentConfig, write: bool = True,
                   reference: Optional[ReferenceSolution] = None) -> ResultBundle:
    """
    Synthesize, invert with every configured (solver, method) pair, evaluate and write.

    Raises:
        StageError: Any failure, tagged with the stage it happened in
    """
    with _stage("synthesize"):
        data = synthesize_data(cfg, reference=reference)
    runs = []
    with _stage("invert"):
        for solver in cfg.solvers:
            for method in cfg.methods:
                runs.append(invert(data, solver, method))
    with _stage("evaluate"):
        for run in runs:
            evaluate_run(run, data)
    bundle = ResultBundle(cfg, data, runs, _provenance(cfg))
    if write:
        with _stage("write"):
            write_bundle(bundle)
    return bundle


def run_sweep(cfg: ExperimentConfig, m_counts: Iterable[int], write: bool = True) -> pd.DataFrame:
    """
    Rerun the inversion for several numbers of density observations.

    The forward reference is solved once and shared by every count.
    """
    with _stage("synthesize"):
        problem = get_preset(cfg.preset).build_problem(cfg.n_per_axis, cfg.n_time)
        reference = forward_solve(problem, REFERENCE_SOLVER, cfg.tol)
    rows = []
    for count in m_counts:
        bundle = run_experiment(cfg.with_overrides(m_obs=int(count)), write=False, reference=reference)
        for run in bundle.runs:
            rows.append({"m_obs": int(count), **run.summary_row()})
    table = sweep_table(rows)
    if write:
        with _stage("write"):
            write_table(table, os.path.join(experiment_dir(cfg), "sweep.csv"))
    return table


def run_forward(cfg: ExperimentConfig, solver: str, write: bool = True) -> ReferenceSolution:
    """Forward solve of the configured preset with one inner solver."""
    with _stage("solve"):
        problem = get_preset(cfg.preset).build_problem(cfg.n_per_axis, cfg.n_time)
        solution = forward_solve(problem, solver, cfg.tol)
    if write:
        with _stage("write"):
            out_dir = os.path.join(experiment_dir(cfg), f"forward-{solver}")
            n_time = problem.n_time or 0
            horizon = problem.horizon or 0.0
            for name in ("m", "u"):
                write_field(os.path.join(out_dir, f"{name}.csv"), name, solution.fields[name], problem.grid,
                            n_time, horizon)
            write_table(solution.trace.to_frame(), os.path.join(out_dir, "trace.csv"))
            write_json({"preset": cfg.preset, "solver": solver, "lambda": solution.fields.get("lambda"),
                        "steps": solution.trace.n_steps, "final_residual": solution.trace.final_residual,
                        "converged": solution.trace.converged},
                       os.path.join(out_dir, "summary.json"))
    return solution


def run_synthesize(cfg: ExperimentConfig, write: bool = True) -> SyntheticData:
    with _stage("synthesize"):
        data = synthesize_data(cfg)
    if write:
        with _stage("write"):
            out_dir = experiment_dir(cfg)
            write_config_file(cfg, os.path.join(out_dir, "config.ini"))
            write_reference(data, out_dir)
    return data
