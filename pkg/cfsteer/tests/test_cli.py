"""Tests for the command-line front end."""
import pytest

from cfsteer import cli
from cfsteer.shared_libraries.constants import ARTIFACTS, EXIT_CODES
from cfsteer.shared_libraries.errors import Infeasible, MaxIterations, NumericalBreakdown
from cfsteer.shared_libraries.models import SolverDiagnostics
from cfsteer.tools.scenario import Overrides


@pytest.fixture
def scenario_file(tmp_path, scenario_text):
    path = tmp_path / "scalar.json"
    path.write_text(scenario_text, encoding='utf-8')
    return path


def test_parser_defaults():
    args = cli.build_parser().parse_args(["run", "--scenario", "gaussian", "--out", "out"])
    assert args.fixed_risk is None
    assert args.seed is None
    assert args.no_timestamp is False
    args = cli.build_parser().parse_args(["run", "--scenario", "gaussian", "--out", "out", "--fixed-risk",
                                          "--lambda-scale", "2", "--mc-samples", "500"])
    assert args.fixed_risk is True
    assert args.lambda_scale == 2.0
    assert args.mc_samples == 500
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["run", "--out", "out"])


def test_run_end_to_end(scenario_file, tmp_path):
    """Test a full run writes every artifact and passes verification."""
    out_dir = tmp_path / "out"
    code = cli.main(["run", "--scenario", str(scenario_file), "--out", str(out_dir), "--mc-samples", "1000"])
    assert code == EXIT_CODES['OK']
    assert all((out_dir / name).exists() for name in ARTIFACTS.values())
    assert cli.main(["verify", "--out", str(out_dir)]) == EXIT_CODES['OK']


def test_missing_scenario_exit_code(tmp_path):
    assert cli.run(str(tmp_path / "nope.json"), tmp_path / "out") == EXIT_CODES['SCENARIO_ERROR']


def test_infeasible_exit_code(mocker, scenario_file, tmp_path):
    mocker.patch('cfsteer.cli.solve', side_effect=Infeasible("no feasible iterate"))
    assert cli.run(str(scenario_file), tmp_path / "out") == EXIT_CODES['INFEASIBLE']


def test_solver_failure_exit_codes(mocker, scenario_file, tmp_path):
    """Test that non-infeasibility solver failures map to the solver exit code."""
    mocker.patch('cfsteer.cli.solve', side_effect=MaxIterations("out of iterations"))
    assert cli.run(str(scenario_file), tmp_path / "out") == EXIT_CODES['SOLVER_FAILURE']

    solution = mocker.Mock(diagnostics=SolverDiagnostics(iterations=3, objective_history=[1.0, 0.5, 0.4]))
    progress = mocker.patch('cfsteer.cli.get_solver_progress', wraps=cli.get_solver_progress)
    mocker.patch('cfsteer.cli.solve', side_effect=NumericalBreakdown("nan", solution))
    assert cli.run(str(scenario_file), tmp_path / "out") == EXIT_CODES['SOLVER_FAILURE']
    progress.assert_called_once()


def test_write_failure_exit_code(mocker, scenario_file, tmp_path):
    mocker.patch('cfsteer.cli.solve')
    mocker.patch('cfsteer.cli.analyze')
    mocker.patch('cfsteer.cli.write_artifacts', side_effect=OSError("read-only"))
    assert cli.run(str(scenario_file), tmp_path / "out") == EXIT_CODES['SCENARIO_ERROR']


def test_overrides_reach_the_loader(mocker, scenario_file, tmp_path):
    run = mocker.patch('cfsteer.cli.run', return_value=0)
    cli.main(["run", "--scenario", str(scenario_file), "--out", str(tmp_path), "--seed", "3", "--no-timestamp"])
    args, kwargs = run.call_args
    assert args[2] == Overrides(seed=3)
    assert kwargs['timestamp'] is False


def test_verify_exit_codes(run_dir, tmp_path):
    assert cli.verify_dir(run_dir) == EXIT_CODES['OK']
    assert cli.verify_dir(tmp_path / "empty") == EXIT_CODES['SCENARIO_ERROR']
    (run_dir / ARTIFACTS['scenario']).write_text(
        (run_dir / ARTIFACTS['scenario']).read_text(encoding='utf-8') + " ", encoding='utf-8')
    assert cli.verify_dir(run_dir) == EXIT_CODES['VALIDATION_FAILURE']
