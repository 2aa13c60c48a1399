"""Command-line front end: `run` solves and validates a scenario, `verify` re-checks a run directory."""
import argparse
import logging
from pathlib import Path
from typing import List, Optional

from .shared_libraries.config import load_settings
from .shared_libraries.constants import EXIT_CODES
from .shared_libraries.errors import (
    ArtifactError, ConsistencyFailure, Infeasible, ScenarioError, SolverError
)
from .tools.progress import get_solver_progress
from .tools.reporting import analyze, write_artifacts
from .tools.scenario import Overrides, load_scenario
from .tools.solver import solve
from .tools.verify import verify

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfsteer",
        description="Chance-constrained distribution steering through characteristic functions")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="solve a scenario, validate it by Monte Carlo and write artifacts")
    run.add_argument("--scenario", required=True,
                     help="scenario file, or the name of a bundled scenario (gaussian, laplace, mixture)")
    run.add_argument("--out", required=True, type=Path, help="output directory")
    run.add_argument("--seed", type=int, help="Monte-Carlo seed (overrides the scenario)")
    run.add_argument("--mc-samples", type=int, help="Monte-Carlo sample count (overrides the scenario)")
    run.add_argument("--lambda-scale", type=float, help="multiply every lambda weight by this factor")
    run.add_argument("--fixed-risk", action="store_true", default=None,
                     help="keep the uniform risk allocation instead of optimizing it")
    run.add_argument("--no-timestamp", action="store_true", help="omit the timestamp from CSV headers")

    check = commands.add_parser("verify", help="re-read a run directory and re-assert its invariants")
    check.add_argument("--out", required=True, type=Path, help="directory written by run")
    return parser


def run(scenario: str, out_dir: Path, overrides: Optional[Overrides] = None, timestamp: bool = True) -> int:
    """Solve, validate and emit artifacts for one scenario.

    Returns:
        int: 0 converged and validated, 1 scenario or I/O error, 2 infeasible,
        3 validation failure, 4 other solver failure
    """
    settings = load_settings()
    try:
        loaded = load_scenario(scenario, overrides, settings.workers)
    except ScenarioError as e:
        logger.error(f"Scenario error: {e}")
        return EXIT_CODES['SCENARIO_ERROR']

    try:
        solution = solve(loaded.problem, workers=settings.workers)
    except Infeasible as e:
        logger.error(f"Infeasible: {e}")
        return EXIT_CODES['INFEASIBLE']
    except SolverError as e:
        if e.solution is None:
            logger.error(f"Solver failed without an iterate: {e}")
        else:
            progress = get_solver_progress(e.solution.diagnostics, loaded.problem.solver.max_outer_iterations)
            logger.error(f"Solver failed ({progress['status']} after {progress['iterations']} outer iterations, "
                         f"last objective {progress['last_objective']}): {e}")
        return EXIT_CODES['SOLVER_FAILURE']

    try:
        result = analyze(loaded, solution)
        write_artifacts(result, out_dir, timestamp=timestamp)
    except OSError as e:
        logger.error(f"Could not write artifacts to {out_dir}: {e}")
        return EXIT_CODES['SCENARIO_ERROR']
    return verify_dir(out_dir)


def verify_dir(out_dir: Path) -> int:
    try:
        verify(out_dir)
    except ArtifactError as e:
        logger.error(f"Artifact error: {e}")
        return EXIT_CODES['SCENARIO_ERROR']
    except ConsistencyFailure as e:
        logger.error(str(e))
        return EXIT_CODES['VALIDATION_FAILURE']
    return EXIT_CODES['OK']


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = load_settings()
    logging.basicConfig(level=settings.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        overrides = Overrides(seed=args.seed, mc_samples=args.mc_samples,
                              lambda_scale=args.lambda_scale, fixed_risk=args.fixed_risk)
        return run(args.scenario, args.out, overrides, timestamp=not args.no_timestamp)
    return verify_dir(args.out)
