"""Re-read emitted artifacts and re-assert the invariants they must satisfy."""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from ..shared_libraries.constants import ARTIFACTS, KS_COEFFICIENT_95, VERIFY_TOLERANCE
from ..shared_libraries.errors import ArtifactError, ConsistencyFailure, ScenarioError
from ..shared_libraries.models import Controller, SteeringProblem
from .matching import joint_bound
from .reporting import read_csv
from .scenario import Scenario, parse_scenario
from .steer import cost_exact
from .validation import validate_columns

logger = logging.getLogger(__name__)

_REQUIRED_COLUMNS = {
    'solution': ['block', 'row', 'col', 'value'],
    'table1': ['dimension', 'sup_deviation', 'distance', 'cdf_gap', 'ks_distance', 'ks_tolerance', 'ks_passed'],
    'table2': ['J', 'joint_bound', 'joint_direct', 'joint_guaranteed', 'delta_x_mc', 'delta_u_mc',
               'budget_x', 'budget_u', 'sample_count'],
    'constraints': ['kind', 'delta', 'cdf', 'margin', 'mc_rate'],
}

# J is written with 17 significant digits, so a recomputation agrees to rounding
_COST_RELATIVE_TOLERANCE = 1e-8


@dataclass
class Artifacts:
    out_dir: Path
    headers: Dict[str, Dict[str, str]]
    frames: Dict[str, pd.DataFrame]
    scenario_text: str


@dataclass
class VerifyReport:
    checks: Dict[str, bool] = field(default_factory=dict)
    messages: Dict[str, str] = field(default_factory=dict)

    @property
    def failed(self) -> List[str]:
        return [name for name, ok in self.checks.items() if not ok]

    @property
    def passed(self) -> bool:
        return not self.failed

    def record(self, name: str, ok: bool, message: str = "") -> None:
        self.checks[name] = bool(ok)
        if message:
            self.messages[name] = message


def load_artifacts(out_dir: Path) -> Artifacts:
    """Read every table verify needs, plus the scenario copy.

    Raises:
        ArtifactError: a file is missing, unreadable or lacks required columns
    """
    out_dir = Path(out_dir)
    headers, frames = {}, {}
    for name, required in _REQUIRED_COLUMNS.items():
        loaded = read_csv(out_dir / ARTIFACTS[name])
        is_valid, message = validate_columns(loaded['frame'], required, ARTIFACTS[name])
        if not is_valid:
            raise ArtifactError(message, str(out_dir / ARTIFACTS[name]))
        headers[name] = loaded['header']
        frames[name] = loaded['frame']
    scenario_path = out_dir / ARTIFACTS['scenario']
    if not scenario_path.exists():
        raise ArtifactError("file not found", str(scenario_path))
    return Artifacts(out_dir=out_dir, headers=headers, frames=frames,
                     scenario_text=scenario_path.read_text(encoding='utf-8'))


def controller_from_frame(frame: pd.DataFrame, problem: SteeringProblem) -> Tuple[Controller, np.ndarray, np.ndarray]:
    """Rebuild (controller, delta_x, delta_u) from the long-format solution table."""
    N = problem.horizon
    n, m, _ = problem.dims
    K = np.zeros((N * m, (N + 1) * n))
    blocks = {name: group for name, group in frame.groupby('block')}
    if 'K' in blocks:
        k_rows = blocks['K']
        K[k_rows['row'].to_numpy(dtype=int), k_rows['col'].to_numpy(dtype=int)] = k_rows['value'].to_numpy(float)

    def _vector(name: str, size: int) -> np.ndarray:
        out = np.zeros(size)
        if name in blocks:
            out[blocks[name]['row'].to_numpy(dtype=int)] = blocks[name]['value'].to_numpy(float)
        return out

    slot_counts = (len(problem.state_constraints), len(problem.input_constraints))
    v = _vector('v', N * m)
    return Controller(K=K, v=v, n=n, m=m), _vector('delta_x', slot_counts[0]), _vector('delta_u', slot_counts[1])


def check_headers(artifacts: Artifacts, report: VerifyReport) -> None:
    """Every table carries the hash of the scenario copy and the same seed."""
    sha = hashlib.sha256(artifacts.scenario_text.encode('utf-8')).hexdigest()
    hashes = {h.get('scenario_sha256') for h in artifacts.headers.values()}
    seeds = {h.get('seed') for h in artifacts.headers.values()}
    ok = hashes == {sha} and len(seeds) == 1
    report.record('scenario_hash', ok, "" if ok else f"headers carry {sorted(map(str, hashes))}, "
                                                      f"scenario.json hashes to {sha}")


def check_deviation_bound(artifacts: Artifacts, report: VerifyReport) -> None:
    """Largest terminal pdf deviation never exceeds the CF distance."""
    table = artifacts.frames['table1']
    deviation = table['sup_deviation'].to_numpy(float)
    distance = table['distance'].to_numpy(float)
    finite = np.isfinite(distance)
    bad = table['dimension'][finite & ~(deviation <= distance + VERIFY_TOLERANCE)].tolist()
    report.record('deviation_bound', not bad, f"dimensions {bad}: sup deviation above distance" if bad else "")


def check_terminal_ks(artifacts: Artifacts, scenario: Scenario, report: VerifyReport) -> None:
    """KS tolerances follow the scenario or the derived rule, and the pass flags follow the tolerances."""
    table = artifacts.frames['table1']
    M = float(artifacts.frames['table2']['sample_count'].iloc[0])
    tolerance = table['ks_tolerance'].to_numpy(float)
    if scenario.ks_tolerances is not None:
        expected = np.asarray(scenario.ks_tolerances, dtype=float)
    else:
        expected = KS_COEFFICIENT_95 / np.sqrt(M) + np.clip(table['cdf_gap'].to_numpy(float), 0.0, 1.0)
    problems = []
    if expected.shape != tolerance.shape or np.any(np.abs(expected - tolerance) > VERIFY_TOLERANCE):
        problems.append(f"tolerances {tolerance.tolist()} differ from {expected.tolist()}")
    flags = table['ks_passed'].astype(bool).to_numpy()
    recomputed = table['ks_distance'].to_numpy(float) < tolerance
    if np.any(flags != recomputed):
        problems.append(f"dimensions {table['dimension'][flags != recomputed].tolist()} misreport ks_passed")
    report.record('terminal_ks', not problems, "; ".join(problems))


def check_joint_bound(artifacts: Artifacts, report: VerifyReport) -> None:
    """The summed bound matches table1, and a guaranteed bound covers the direct joint distance."""
    row = artifacts.frames['table2'].iloc[0]
    distances = artifacts.frames['table1']['distance'].to_numpy(float)
    bound = float(row['joint_bound'])
    problems = []
    if np.all(np.isfinite(distances)) and abs(joint_bound(distances) - bound) > VERIFY_TOLERANCE:
        problems.append(f"joint_bound {bound:.6g} is not the summed distance {joint_bound(distances):.6g}")
    direct = float(row['joint_direct'])
    if np.isfinite(direct) and direct > bound + VERIFY_TOLERANCE:
        if bool(row['joint_guaranteed']):
            problems.append(f"direct joint distance {direct:.6g} exceeds the guaranteed bound {bound:.6g}")
        else:
            logger.warning(f"Direct joint distance {direct:.6g} exceeds the heuristic bound {bound:.6g}")
    report.record('joint_bound', not problems, "; ".join(problems))


def check_risk_budget(artifacts: Artifacts, problem: SteeringProblem, deltas_x: np.ndarray,
                      deltas_u: np.ndarray, report: VerifyReport) -> None:
    """Risk shares are nonnegative and sum to at most the budgets."""
    problems = []
    if np.any(deltas_x < 0) or np.any(deltas_u < 0):
        problems.append("negative risk share")
    if deltas_x.sum() > problem.budget_x + VERIFY_TOLERANCE:
        problems.append(f"state shares sum to {deltas_x.sum():.6g} > {problem.budget_x:.6g}")
    if deltas_u.sum() > problem.budget_u + VERIFY_TOLERANCE:
        problems.append(f"input shares sum to {deltas_u.sum():.6g} > {problem.budget_u:.6g}")
    report.record('risk_budget', not problems, "; ".join(problems))


def check_cost(artifacts: Artifacts, problem: SteeringProblem, ctrl: Controller, report: VerifyReport) -> None:
    """J recomputed from scenario.json and solution.csv matches table2."""
    reported = float(artifacts.frames['table2']['J'].iloc[0])
    recomputed = cost_exact(problem, ctrl)
    ok = abs(recomputed - reported) <= _COST_RELATIVE_TOLERANCE * max(1.0, abs(reported))
    report.record('cost_recomputation', ok, "" if ok else f"J {reported!r} vs recomputed {recomputed!r}")


def check_chance_constraints(artifacts: Artifacts, problem: SteeringProblem, report: VerifyReport) -> None:
    """Every per-hyperplane margin is cdf - (1 - delta) and nonnegative up to the solver tolerance."""
    table = artifacts.frames['constraints']
    if table.empty:
        report.record('chance_constraints', True)
        return
    slack = problem.solver.feasibility_tolerance + VERIFY_TOLERANCE
    expected = table['cdf'] - (1.0 - table['delta'])
    consistent = np.abs(expected - table['margin']) <= VERIFY_TOLERANCE
    satisfied = table['margin'] >= -slack
    bad = table.index[~(consistent & satisfied)].tolist()
    report.record('chance_constraints', not bad, f"rows {bad} violate or misreport their margin" if bad else "")


def check_union_bound(artifacts: Artifacts, report: VerifyReport) -> None:
    """Joint empirical violation rates do not exceed the summed per-hyperplane rates."""
    table2 = artifacts.frames['table2'].iloc[0]
    constraints = artifacts.frames['constraints']
    problems = []
    for kind, column in (('state', 'delta_x_mc'), ('input', 'delta_u_mc')):
        total = float(constraints.loc[constraints['kind'] == kind, 'mc_rate'].sum())
        if float(table2[column]) > total + VERIFY_TOLERANCE:
            problems.append(f"{column} {float(table2[column]):.6g} > summed rates {total:.6g}")
    report.record('mc_union_bound', not problems, "; ".join(problems))


def check_mc_budget(artifacts: Artifacts, report: VerifyReport) -> None:
    """Joint empirical violation rates stay within budget up to three binomial standard errors."""
    table2 = artifacts.frames['table2'].iloc[0]
    M = float(table2['sample_count'])
    problems = []
    for column, budget_column in (('delta_x_mc', 'budget_x'), ('delta_u_mc', 'budget_u')):
        budget = float(table2[budget_column])
        slack = 3.0 * np.sqrt(budget * (1.0 - budget) / M)
        if float(table2[column]) > budget + slack:
            problems.append(f"{column} {float(table2[column]):.6g} > budget {budget:.6g}")
    report.record('mc_budget', not problems, "; ".join(problems))


def run_checks(artifacts: Artifacts) -> VerifyReport:
    """Every consistency check over a loaded artifact set."""
    report = VerifyReport()
    try:
        scenario = parse_scenario(artifacts.scenario_text, str(artifacts.out_dir / ARTIFACTS['scenario']))
    except ScenarioError as e:
        raise ArtifactError(f"scenario copy does not load: {e}", str(artifacts.out_dir)) from e
    problem = scenario.problem
    try:
        ctrl, deltas_x, deltas_u = controller_from_frame(artifacts.frames['solution'], problem)
    except (ValueError, IndexError) as e:
        raise ArtifactError(f"solution table does not fit the scenario: {e}",
                            str(artifacts.out_dir / ARTIFACTS['solution'])) from e

    check_headers(artifacts, report)
    check_deviation_bound(artifacts, report)
    check_terminal_ks(artifacts, scenario, report)
    check_joint_bound(artifacts, report)
    check_risk_budget(artifacts, problem, deltas_x, deltas_u, report)
    check_cost(artifacts, problem, ctrl, report)
    check_chance_constraints(artifacts, problem, report)
    check_union_bound(artifacts, report)
    check_mc_budget(artifacts, report)
    for name, ok in report.checks.items():
        if ok:
            logger.debug(f"check {name}: ok")
        else:
            logger.error(f"check {name} failed: {report.messages.get(name, '')}")
    return report


def verify(out_dir: Path) -> Dict[str, Any]:
    """Re-assert the invariants of a run directory.

    Args:
        out_dir (Path): directory written by `run`

    Returns:
        Dict[str, Any]: {'passed': True, 'checks': {...}}

    Raises:
        ArtifactError: an artifact is missing or unreadable
        ConsistencyFailure: at least one check failed
    """
    report = run_checks(load_artifacts(out_dir))
    if not report.passed:
        raise ConsistencyFailure(report.failed)
    logger.info(f"All {len(report.checks)} checks passed for {out_dir}")
    return {'passed': True, 'checks': report.checks}
