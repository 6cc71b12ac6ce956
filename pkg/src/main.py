import argparse
import logging
import os
import sys
import traceback
from typing import List, Optional

import pandas as pd

from config import INNER_SOLVERS, OUTER_METHODS, ExperimentConfig, resolve_config
from exceptions import ConfigError, MfgError, StageError
from experiments import run_experiment, run_forward, run_sweep, run_synthesize
from presets import preset_catalog
from user_interface import choose_preset_interactive, resolve_preset_name

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "MFG_LOG_LEVEL"
TESTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "tests")


def configure_logging() -> None:
    name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        logger.warning("Unknown log level %r in %s, using WARNING", name, LOG_LEVEL_ENV)
        return
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("preset", nargs="?", help="Preset id (fuzzy matches are accepted)")
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="out_dir", help="Output directory")
    common.add_argument("--tol", type=float, help="Inner solver tolerance")
    common.add_argument("--n-per-axis", type=int, help="Grid nodes per axis")
    common.add_argument("--n-time", type=int, help="Number of time steps")

    inversion = argparse.ArgumentParser(add_help=False)
    inversion.add_argument("--solver", choices=INNER_SOLVERS + ("all",))
    inversion.add_argument("--method", choices=OUTER_METHODS + ("both",))
    inversion.add_argument("--max-iter", type=int, help="Outer iteration cap")
    inversion.add_argument("--noise", type=float, help="Observation noise standard deviation")
    inversion.add_argument("--gd-metric", choices=("euclidean", "kernel"))

    parser = argparse.ArgumentParser(prog="mfg", description="Forward and inverse mean-field game experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    forward = sub.add_parser("forward", parents=[common], help="Solve a preset's forward problem")
    forward.add_argument("--solver", choices=INNER_SOLVERS, default="hrf")
    sub.add_parser("invert", parents=[common, inversion], help="Recover the potential from observations")
    synth = sub.add_parser("synthesize", parents=[common], help="Write reference fields and observations")
    synth.add_argument("--noise", type=float)
    sweep = sub.add_parser("sweep", parents=[common, inversion], help="Errors against density observation count")
    sweep.add_argument("--counts", type=int, nargs="+", required=True, help="Density observation counts")
    sub.add_parser("catalog", help="List the presets")
    check = sub.add_parser("check", help="Run the test suite")
    check.add_argument("--all", action="store_true", help="Include slow tests")
    return parser


def _preset_name(args: argparse.Namespace) -> Optional[str]:
    if args.preset:
        return resolve_preset_name(args.preset)
    if args.config:
        return None
    if sys.stdin.isatty():
        name = choose_preset_interactive()
        if name is None:
            raise ConfigError("no preset selected")
        return name
    raise ConfigError("no preset given")


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {key: getattr(args, key, None) for key in
                 ("seed", "out_dir", "tol", "n_per_axis", "n_time", "solver", "method", "max_iter", "noise",
                  "gd_metric")}
    if args.command == "forward":
        overrides.pop("solver")
    return resolve_config(_preset_name(args), args.config, overrides)


def print_catalog() -> None:
    rows = [{"preset": p.name, "dim": p.dim, "grid": p.n_per_axis, "n_time": p.n_time or "-",
             "nu": p.viscosity, "m_obs": p.m_obs, "v_obs": p.v_obs, "alpha": p.alpha,
             "beta": p.beta, "gamma": p.gamma} for p in preset_catalog()]
    print(pd.DataFrame(rows).to_string(index=False))


def run_check(include_slow: bool) -> int:
    import pytest

    args = [os.path.normpath(TESTS_DIR)]
    if include_slow:
        args += ["-m", ""]
    return int(pytest.main(args))


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "catalog":
        print_catalog()
        return 0
    if args.command == "check":
        return run_check(args.all)

    cfg = experiment_config(args)
    print(f"Mean-field game experiments: {args.command} {cfg.preset}")
    print("=" * 60)
    if args.command == "forward":
        solution = run_forward(cfg, args.solver)
        lam = solution.fields.get("lambda")
        if lam is not None:
            print(f"lambda = {lam:.11f}")
        print(f"{solution.trace.n_steps} steps, final residual {solution.trace.final_residual:.3e}")
    elif args.command == "synthesize":
        data = run_synthesize(cfg)
        print(f"{data.m_obs.n_obs} density and {data.v_obs.n_obs} potential observations written")
    elif args.command == "invert":
        bundle = run_experiment(cfg)
        print(bundle.comparison().to_string(index=False))
        print(f"\nbundle hash {bundle.bundle_hash()}")
    elif args.command == "sweep":
        print(run_sweep(cfg, args.counts).to_string(index=False))
    if cfg.out_dir:
        print(f"\nResults in {os.path.join(cfg.out_dir, cfg.preset)}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        if isinstance(e.cause, ConfigError):
            print(f"Configuration error: {e}", file=sys.stderr)
            return 2
        print(f"Error in stage {e}", file=sys.stderr)
        return 1
    except MfgError as e:
        print(f"Error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception:
        print(traceback.format_exc(), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
