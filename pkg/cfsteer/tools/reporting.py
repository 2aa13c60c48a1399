"""Run analysis and artifact emission: CSV tables, scenario copy and a markdown summary."""
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader
from pydantic import BaseModel, Field
from scipy import integrate

from ..shared_libraries.constants import ARTIFACTS
from ..shared_libraries.errors import ArtifactError, DegenerateDistribution
from ..shared_libraries.models import (
    ConstraintKind, LiftedSystem, McReport, Solution, SteeringProblem, causal_mask
)
from . import cf
from .constraints import boole_decompose, evaluate_margins, slot_deltas
from .lift import closed_loop, lift, lifted_moments
from .matching import (
    JointBoundReport, as_lincombo, comparison_grid, density_values, joint_bound, joint_bound_check,
    terminal_marginal_cf
)
from .mc import derive_ks_tolerances, rate_stderr, simulate
from .scenario import Scenario

logger = logging.getLogger(__name__)

HEADER_PREFIX = "# cfsteer"


class ReportConfig(BaseModel):
    """Configuration for artifact emission."""
    template_dir: Path = Field(default_factory=lambda: Path(__file__).resolve().parent.parent / "templates")
    summary_template: str = "summary.md.j2"
    float_format: str = "%.17g"
    timestamp: bool = True


@dataclass
class TerminalDensity:
    """Achieved and target pdf of one terminal dimension on a shared grid."""
    dimension: int
    grid: np.ndarray
    achieved: np.ndarray
    target: np.ndarray

    @property
    def sup_deviation(self) -> float:
        if self.grid.size == 0:
            return float('inf')
        return float(np.max(np.abs(self.achieved - self.target)))

    @property
    def cdf_gap(self) -> float:
        """sup |F_achieved - F_target| on the grid; 1 when there is no density."""
        if self.grid.size == 0:
            return 1.0
        gap = integrate.cumulative_trapezoid(self.achieved - self.target, self.grid, initial=0.0)
        return float(min(1.0, np.max(np.abs(gap))))


@dataclass
class RunResult:
    scenario: Scenario
    solution: Solution
    mc: McReport
    densities: List[TerminalDensity]
    constraints: pd.DataFrame
    ks_tolerances: List[float]
    ks_passed: List[bool] = field(default_factory=list)
    lifted: Optional[LiftedSystem] = None
    joint: Optional[JointBoundReport] = None

    @property
    def problem(self) -> SteeringProblem:
        return self.scenario.problem


def terminal_densities(problem: SteeringProblem, solution: Solution, lifted: LiftedSystem) -> List[TerminalDensity]:
    """Achieved (Fourier inversion) and target pdf per terminal dimension.

    A degenerate terminal marginal has no density; it gets an empty grid and
    an infinite deviation.
    """
    densities = []
    for i, marginal in enumerate(problem.target.marginals):
        lc = terminal_marginal_cf(lifted, solution.controller, problem.x0_dists, problem.w_dists, i)
        try:
            grid = comparison_grid(lc, as_lincombo(marginal))
            achieved = density_values(lc, grid, problem.quadrature)
        except DegenerateDistribution as e:
            logger.warning(f"Terminal dimension {i} is degenerate at {e.value:.6g}")
            empty = np.zeros(0)
            densities.append(TerminalDensity(i, empty, empty, empty))
            continue
        densities.append(TerminalDensity(i, grid, achieved, density_values(marginal, grid)))
    return densities


def constraint_table(problem: SteeringProblem, solution: Solution, lifted: LiftedSystem,
                     mc: McReport) -> pd.DataFrame:
    """One row per decomposed hyperplane: risk share, cdf, margin and empirical rate."""
    slots = boole_decompose(problem)
    evaluations = evaluate_margins(problem, lifted, solution.controller, slots, solution.risk)
    deltas = slot_deltas(slots, solution.risk)
    rows = []
    for slot, delta, e in zip(slots, deltas, evaluations):
        hc = slot.constraint
        if hc.kind == ConstraintKind.STATE:
            rate, stderr = mc.state_rates[slot.slot], mc.state_rate_stderr[slot.slot]
        else:
            rate, stderr = mc.input_rates[slot.slot], mc.input_rate_stderr[slot.slot]
        rows.append({
            'kind': hc.kind.value,
            'label': hc.label,
            'stage': hc.stage,
            'row': hc.row,
            'delta': float(delta),
            'cdf': e.cdf,
            'margin': e.margin,
            'mc_rate': float(rate),
            'mc_stderr': float(stderr),
        })
    columns = ['kind', 'label', 'stage', 'row', 'delta', 'cdf', 'margin', 'mc_rate', 'mc_stderr']
    return pd.DataFrame(rows, columns=columns)


def analyze(scenario: Scenario, solution: Solution, lifted: Optional[LiftedSystem] = None) -> RunResult:
    """Monte-Carlo validation plus every quantity the artifacts report.

    Args:
        scenario (Scenario): the loaded scenario
        solution (Solution): the solved controller and risk allocation
        lifted (LiftedSystem, optional): precomputed lift

    Returns:
        RunResult: everything `write_artifacts` needs
    """
    problem = scenario.problem
    lifted = lifted or lift(problem.system)
    mc = simulate(problem, solution.controller, scenario.mc, lifted)
    densities = terminal_densities(problem, solution, lifted)
    constraints = constraint_table(problem, solution, lifted, mc)
    gaps = [d.cdf_gap for d in densities]
    tolerances = scenario.ks_tolerances or derive_ks_tolerances(mc.sample_count, gaps)
    passed = [ks < tol for ks, tol in zip(mc.ks_distances, tolerances)]
    for i, ok in enumerate(passed):
        if not ok:
            logger.warning(f"Terminal dimension {i}: KS {mc.ks_distances[i]:.4f} "
                           f">= tolerance {tolerances[i]:.4f}")
    joint = JointBoundReport(bound=float('inf'))
    if np.all(np.isfinite(solution.distances)):
        joint = joint_bound_check(solution.distances, lifted, solution.controller, problem.x0_dists,
                                  problem.w_dists, problem.target, problem.quadrature)
    return RunResult(scenario=scenario, solution=solution, mc=mc, densities=densities,
                     constraints=constraints, ks_tolerances=list(tolerances), ks_passed=passed,
                     lifted=lifted, joint=joint)


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def solution_frame(solution: Solution) -> pd.DataFrame:
    """Long format (block, row, col, value): causal K entries, v, delta_x and delta_u."""
    ctrl = solution.controller
    rows, cols = np.nonzero(causal_mask(ctrl.horizon, ctrl.n, ctrl.m))
    frames = [
        pd.DataFrame({'block': 'K', 'row': rows, 'col': cols, 'value': ctrl.K[rows, cols]}),
        pd.DataFrame({'block': 'v', 'row': np.arange(ctrl.v.size), 'col': 0, 'value': ctrl.v}),
        pd.DataFrame({'block': 'delta_x', 'row': np.arange(solution.risk.deltas_x.size), 'col': 0,
                      'value': solution.risk.deltas_x}),
        pd.DataFrame({'block': 'delta_u', 'row': np.arange(solution.risk.deltas_u.size), 'col': 0,
                      'value': solution.risk.deltas_u}),
    ]
    return pd.concat(frames, ignore_index=True)


def table1_frame(result: RunResult) -> pd.DataFrame:
    """Largest density deviation against the CF distance, per terminal dimension."""
    problem = result.problem
    rows = []
    for density in result.densities:
        i = density.dimension
        deviation = density.sup_deviation
        distance = result.solution.distances[i]
        rows.append({
            'dimension': i,
            'sup_deviation': deviation,
            'distance': distance,
            'bound_holds': bool(np.isfinite(distance) and deviation <= distance + 1e-6),
            'lambda': float(problem.penalties[i]),
            'cdf_gap': density.cdf_gap,
            'ks_distance': result.mc.ks_distances[i],
            'ks_tolerance': result.ks_tolerances[i],
            'ks_passed': result.ks_passed[i],
        })
    return pd.DataFrame(rows)


def table2_frame(result: RunResult) -> pd.DataFrame:
    """Exact against empirical cost and the joint violation rates, one row."""
    solution, mc, problem = result.solution, result.mc, result.problem
    distances = solution.distances
    joint = result.joint or JointBoundReport(
        bound=joint_bound(distances) if np.all(np.isfinite(distances)) else float('inf'))
    return pd.DataFrame([{
        'scenario': result.scenario.name,
        'J': solution.cost,
        'J_MC': mc.cost_mean,
        'J_MC_stderr': mc.cost_stderr,
        'relative_gap': abs(solution.cost - mc.cost_mean) / max(abs(solution.cost), 1e-300),
        'objective': solution.objective,
        'joint_bound': joint.bound,
        'joint_direct': float('nan') if joint.direct is None else joint.direct,
        'joint_guaranteed': bool(joint.guaranteed),
        'delta_x_mc': mc.state_joint_rate,
        'delta_x_mc_stderr': float(rate_stderr(mc.state_joint_rate, mc.sample_count)),
        'delta_u_mc': mc.input_joint_rate,
        'delta_u_mc_stderr': float(rate_stderr(mc.input_joint_rate, mc.sample_count)),
        'delta_x_stage_mc': mc.state_stage_rate,
        'delta_u_stage_mc': mc.input_stage_rate,
        'budget_x': problem.budget_x,
        'budget_u': problem.budget_u,
        'risk_x': solution.risk.total_x,
        'risk_u': solution.risk.total_u,
        'sample_count': mc.sample_count,
        'converged': solution.diagnostics.converged,
        'iterations': solution.diagnostics.iterations,
        'status': solution.diagnostics.status,
    }])


def trajectories_frame(result: RunResult) -> pd.DataFrame:
    """Per-stage state summaries and sample paths.

    `kind` is one of mean/std (empirical), predicted_mean/predicted_std
    (exact lifted moments) or sample; `sample` is -1 on summary rows.
    """
    problem, mc = result.problem, result.mc
    lifted = result.lifted or lift(problem.system)
    ctrl = result.solution.controller
    N, n = lifted.horizon, lifted.n
    mean, cov = lifted_moments(lifted, problem.x0_dists, problem.w_dists)
    P = closed_loop(lifted, ctrl)
    predicted_mean = (P @ mean + lifted.B @ ctrl.v).reshape(N + 1, n)
    predicted_std = np.sqrt(np.maximum(np.diag(P @ cov @ P.T), 0.0)).reshape(N + 1, n)

    state_columns = [f"x{i}" for i in range(n)]
    blocks = []

    def _block(kind: str, sample: int, values: np.ndarray) -> pd.DataFrame:
        frame = pd.DataFrame(values, columns=state_columns)
        frame.insert(0, 'stage', np.arange(N + 1))
        frame.insert(0, 'sample', sample)
        frame.insert(0, 'kind', kind)
        return frame

    blocks.append(_block('mean', -1, mc.state_mean))
    blocks.append(_block('std', -1, mc.state_std))
    blocks.append(_block('predicted_mean', -1, predicted_mean))
    blocks.append(_block('predicted_std', -1, predicted_std))
    for s, path in enumerate(mc.sample_paths):
        blocks.append(_block('sample', s, path))
    return pd.concat(blocks, ignore_index=True)


def terminal_density_frame(result: RunResult) -> pd.DataFrame:
    frames = [pd.DataFrame({'dimension': d.dimension, 'z': d.grid, 'achieved_pdf': d.achieved,
                            'target_pdf': d.target}) for d in result.densities]
    return pd.concat(frames, ignore_index=True)


def terminal_histogram_frame(result: RunResult) -> pd.DataFrame:
    """Empirical terminal histograms with the target pdf at the bin centers."""
    frames = []
    for i, (density, edges) in enumerate(result.mc.histograms):
        centers = 0.5 * (edges[:-1] + edges[1:])
        frames.append(pd.DataFrame({
            'dimension': i,
            'bin_left': edges[:-1],
            'bin_right': edges[1:],
            'density': density,
            'target_pdf': cf.pdf(result.problem.target.marginals[i], centers),
        }))
    return pd.concat(frames, ignore_index=True)


# ---------------------------------------------------------------------------
# Writing and reading
# ---------------------------------------------------------------------------

def header_line(sha256: str, seed: int, timestamp: bool = True) -> str:
    parts = [HEADER_PREFIX, f"scenario_sha256={sha256}", f"seed={seed}"]
    if timestamp:
        parts.append(f"generated={datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')}")
    return " ".join(parts)


def parse_header(line: str) -> Dict[str, str]:
    """key=value pairs of a `# cfsteer ...` header line."""
    if not line.startswith(HEADER_PREFIX):
        raise ValueError(f"Not a cfsteer header: {line[:40]!r}")
    return dict(part.split('=', 1) for part in line[len(HEADER_PREFIX):].split() if '=' in part)


def write_csv(frame: pd.DataFrame, path: Path, header: str, float_format: str = "%.17g") -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(header + "\n")
        frame.to_csv(f, index=False, float_format=float_format, lineterminator='\n')


def read_csv(path: Path) -> Dict[str, Any]:
    """Read an artifact table and its header.

    Returns:
        Dict[str, Any]: {'header': dict, 'frame': DataFrame}

    Raises:
        ArtifactError: the file is missing or malformed
    """
    if not path.exists():
        raise ArtifactError("file not found", str(path))
    try:
        with open(path, encoding='utf-8') as f:
            header = parse_header(f.readline().rstrip("\n"))
        frame = pd.read_csv(path, comment='#', float_precision='round_trip')
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise ArtifactError(f"cannot read artifact: {e}", str(path)) from e
    return {'header': header, 'frame': frame}


class ReportWriter:
    """Writes every artifact of a run into one directory."""

    def __init__(self, config: Optional[ReportConfig] = None):
        self.config = config or ReportConfig()
        self.env = Environment(loader=FileSystemLoader(str(self.config.template_dir)),
                               keep_trailing_newline=True)
        self.env.filters['num'] = lambda v, digits=4: "inf" if not np.isfinite(v) else f"{float(v):.{digits}g}"

    def frames(self, result: RunResult) -> Dict[str, pd.DataFrame]:
        return {
            'solution': solution_frame(result.solution),
            'table1': table1_frame(result),
            'table2': table2_frame(result),
            'trajectories': trajectories_frame(result),
            'terminal_density': terminal_density_frame(result),
            'terminal_histogram': terminal_histogram_frame(result),
            'constraints': result.constraints,
        }

    def render_summary(self, result: RunResult, frames: Dict[str, pd.DataFrame]) -> str:
        template = self.env.get_template(self.config.summary_template)
        return template.render(
            scenario=result.scenario,
            seed=result.mc.seed,
            diagnostics=result.solution.diagnostics,
            table1=frames['table1'].to_dict(orient='records'),
            table2=frames['table2'].to_dict(orient='records')[0],
            constraints=frames['constraints'].to_dict(orient='records'),
        )

    def write(self, result: RunResult, out_dir: Path) -> Dict[str, Path]:
        """Write the artifacts and return their paths by name."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        header = header_line(result.scenario.sha256, result.mc.seed, self.config.timestamp)
        frames = self.frames(result)
        paths = {}
        for name, frame in frames.items():
            paths[name] = out_dir / ARTIFACTS[name]
            write_csv(frame, paths[name], header, self.config.float_format)
        paths['scenario'] = out_dir / ARTIFACTS['scenario']
        paths['scenario'].write_text(result.scenario.text, encoding='utf-8')
        paths['summary'] = out_dir / ARTIFACTS['summary']
        paths['summary'].write_text(self.render_summary(result, frames), encoding='utf-8')
        logger.info(f"Wrote {len(paths)} artifacts to {out_dir}")
        return paths


def write_artifacts(result: RunResult, out_dir: Path, timestamp: bool = True) -> Dict[str, Path]:
    return ReportWriter(ReportConfig(timestamp=timestamp)).write(result, out_dir)
