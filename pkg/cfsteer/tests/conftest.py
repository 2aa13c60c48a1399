"""Test configuration and fixtures."""
import copy
import json
import shutil
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root directory to Python path
project_root = str(Path(__file__).parent.parent.parent)
sys.path.insert(0, project_root)

from cfsteer.shared_libraries.models import (  # noqa: E402
    ConstraintKind, HalfspaceConstraint, LtvSystem, QuadratureSpec, ScalarDist, SolverOptions,
    SteeringProblem, TargetDensity
)

# Scenario-file twin of the default scalar problem, with a small Monte-Carlo run
SCALAR_SCENARIO = {
    "schema_version": 1,
    "name": "scalar",
    "description": "Scalar random walk with state and input chance constraints.",
    "system": {"type": "explicit", "horizon": 2, "A": [[1.0]], "B": [[1.0]], "D": [[1.0]]},
    "initial_distribution": [{"family": "gaussian", "mean": 0.0, "variance": 0.1}],
    "disturbance": {"per_stage": [{"family": "gaussian", "mean": 0.0, "variance": 0.05}]},
    "state_constraints": [{"normal": [1.0], "bound": 1.5, "stages": [1, 2]}],
    "input_constraints": [
        {"normal": [1.0], "bound": 3.0, "stages": [0, 1]},
        {"normal": [-1.0], "bound": 3.0, "stages": [0, 1]}
    ],
    "thresholds": {"state": 0.1, "input": 0.1},
    "weights": {"Q": [1.0], "R": [0.1], "lambda": [1.0]},
    "reference": {"explicit": [[0.0], [0.5], [1.0]]},
    "target": [{"family": "gaussian", "mean": 1.0, "variance": 0.2}],
    "solver": {"max_outer_iterations": 60},
    "mc": {"sample_count": 2000, "seed": 7, "bins": 20}
}

# Gaussian components with a truncation that is converged and independent of the iterate
FIXED_QUADRATURE = QuadratureSpec.fixed(40.0)


def _scalar_problem(horizon=2, x0=None, w=None, state_bound=1.5, input_bound=3.0, budget=0.1,
                    penalty=1.0, target=None, quadrature=None, solver=None, constrained=True):
    system = LtvSystem.time_invariant(np.eye(1), np.eye(1), np.eye(1), horizon)
    x0 = x0 or ScalarDist.gaussian(0.0, 0.1)
    w = w or ScalarDist.gaussian(0.0, 0.05)
    state, inputs = [], []
    if constrained:
        state = [HalfspaceConstraint(normal=[1.0], bound=state_bound, stage=k, kind=ConstraintKind.STATE)
                 for k in range(1, horizon + 1)]
        inputs = [HalfspaceConstraint(normal=[sign], bound=input_bound, stage=k, kind=ConstraintKind.INPUT,
                                      row=j)
                  for k in range(horizon) for j, sign in enumerate((1.0, -1.0))]
    return SteeringProblem(
        system=system,
        x0_dists=(x0,),
        w_dists=(w,) * horizon,
        state_constraints=tuple(state),
        input_constraints=tuple(inputs),
        budget_x=budget,
        budget_u=budget,
        Q=(np.eye(1),) * horizon,
        R=(0.1 * np.eye(1),) * horizon,
        reference=np.linspace(0.0, 1.0, horizon + 1),
        target=TargetDensity(marginals=(target or ScalarDist.gaussian(1.0, 0.2),)),
        penalties=np.array([penalty]),
        quadrature=quadrature or QuadratureSpec(),
        solver=solver or SolverOptions(max_outer_iterations=60),
    )


@pytest.fixture
def problem_factory():
    """Builds scalar (n = m = p = 1) problems with A = B = D = 1."""
    return _scalar_problem


@pytest.fixture
def scalar_problem():
    return _scalar_problem()


@pytest.fixture
def scenario_dict():
    return copy.deepcopy(SCALAR_SCENARIO)


@pytest.fixture
def scenario_text():
    return json.dumps(SCALAR_SCENARIO, indent=2)


@pytest.fixture
def rng():
    return np.random.default_rng(20231)


@pytest.fixture
def planar_problem():
    """Two-state, one-input system with two independent disturbance channels."""
    horizon = 2
    A = np.array([[1.0, 0.5], [0.0, 1.0]])
    B = np.array([[0.125], [0.5]])
    D = np.eye(2) * 0.3
    system = LtvSystem.time_invariant(A, B, D, horizon)
    return SteeringProblem(
        system=system,
        x0_dists=(ScalarDist.gaussian(0.0, 0.2), ScalarDist.gaussian(0.5, 0.1)),
        w_dists=(ScalarDist.gaussian(0.0, 0.5),) * (2 * horizon),
        state_constraints=(HalfspaceConstraint(normal=[1.0, 1.0], bound=4.0, stage=2,
                                               kind=ConstraintKind.STATE),),
        input_constraints=tuple(HalfspaceConstraint(normal=[1.0], bound=2.0, stage=k, kind=ConstraintKind.INPUT)
                                for k in range(horizon)),
        budget_x=0.1,
        budget_u=0.1,
        Q=(np.diag([1.0, 0.5]),) * horizon,
        R=(np.eye(1),) * horizon,
        reference=np.array([0.0, 0.5, 0.5, 0.5, 1.0, 0.5]),
        target=TargetDensity(marginals=(ScalarDist.gaussian(1.2, 0.4), ScalarDist.gaussian(0.4, 0.3))),
        penalties=np.array([2.0, 1.0]),
        quadrature=FIXED_QUADRATURE,
    )


@pytest.fixture(scope="session")
def run_result():
    """The scalar scenario solved and analyzed once per session."""
    from cfsteer.tools.reporting import analyze
    from cfsteer.tools.scenario import parse_scenario
    from cfsteer.tools.solver import solve

    scenario = parse_scenario(json.dumps(SCALAR_SCENARIO, indent=2), "scalar.json")
    return analyze(scenario, solve(scenario.problem))


@pytest.fixture(scope="session")
def written_run(run_result, tmp_path_factory):
    """Artifacts of `run_result`, written once; copy before modifying."""
    from cfsteer.tools.reporting import write_artifacts

    out_dir = tmp_path_factory.mktemp("run")
    write_artifacts(run_result, out_dir, timestamp=False)
    return out_dir


@pytest.fixture
def run_dir(written_run, tmp_path):
    """A private copy of the written artifacts."""
    target = tmp_path / "run"
    shutil.copytree(written_run, target)
    return target
