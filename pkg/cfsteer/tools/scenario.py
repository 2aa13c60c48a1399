"""Scenario files: loading, validation and conversion into a SteeringProblem."""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from ..shared_libraries.config import load_settings
from ..shared_libraries.errors import DimensionMismatch, ScenarioError
from ..shared_libraries.models import (
    ConstraintKind, HalfspaceConstraint, LtvSystem, McConfig, QuadratureSpec, ScalarDist, SolverOptions,
    SteeringProblem, TargetDensity, TruncationMode, dict_to_dist
)
from ..shared_libraries.types import DoubleIntegratorSpec, HyperplaneSpec, ReferenceSpec, ScenarioFile
from .validation import validate_problem

logger = logging.getLogger(__name__)


@dataclass
class Overrides:
    """Command-line overrides applied on top of a scenario file."""
    seed: Optional[int] = None
    mc_samples: Optional[int] = None
    lambda_scale: Optional[float] = None
    fixed_risk: Optional[bool] = None


@dataclass
class Scenario:
    name: str
    text: str
    sha256: str
    document: ScenarioFile
    problem: SteeringProblem
    mc: McConfig
    ks_tolerances: Optional[List[float]] = None
    source: str = "<string>"
    overrides: Overrides = field(default_factory=Overrides)


def double_integrator(dt: float, horizon: int, disturbance_entry: str = 'velocity') -> LtvSystem:
    """Planar double integrator, state [x, x_dot, y, y_dot], input [a_x, a_y].

    Args:
        dt (float): sampling time
        horizon (int): number of stages N
        disturbance_entry (str): 'velocity' adds dt * w to the velocities, 'input' uses D = B

    Returns:
        LtvSystem: time-invariant system over the horizon
    """
    axis_A = np.array([[1.0, dt], [0.0, 1.0]])
    axis_B = np.array([[0.5 * dt * dt], [dt]])
    A = np.kron(np.eye(2), axis_A)
    B = np.kron(np.eye(2), axis_B)
    if disturbance_entry == 'velocity':
        D = np.kron(np.eye(2), np.array([[0.0], [dt]]))
    elif disturbance_entry == 'input':
        D = B.copy()
    else:
        raise ValueError(f"Unknown disturbance entry: {disturbance_entry}")
    return LtvSystem.time_invariant(A, B, D, horizon)


def waypoint_reference(segments: Sequence[Any], horizon: int, n: int, dt: float,
                       position_indices: Sequence[int] = (0, 2),
                       velocity_indices: Sequence[int] = (1, 3)) -> np.ndarray:
    """Stacked reference X_d from straight-line waypoint segments.

    Positions are interpolated linearly over each segment's stages and
    velocities are the per-stage displacement over dt. Segments may jump
    between each other; every stage 0..N must be covered.

    Returns:
        np.ndarray: reference of length (N+1) n
    """
    reference = np.full((horizon + 1, n), np.nan)
    for segment in segments:
        k0, k1 = segment.stages
        if k1 > horizon:
            raise ValueError(f"Waypoint stages {segment.stages} exceed the horizon {horizon}")
        start = np.asarray(segment.start, dtype=float)
        end = np.asarray(segment.end, dtype=float)
        steps = k1 - k0
        velocity = (end - start) / (steps * dt) if steps > 0 else np.zeros(2)
        for k in range(k0, k1 + 1):
            frac = (k - k0) / steps if steps > 0 else 0.0
            reference[k, list(position_indices)] = start + frac * (end - start)
            reference[k, list(velocity_indices)] = velocity
    if np.any(np.isnan(reference)):
        missing = sorted({int(k) for k in np.argwhere(np.isnan(reference))[:, 0]})
        raise ValueError(f"Reference does not cover stages {missing}")
    return reference.ravel()


def _dist(spec) -> ScalarDist:
    return dict_to_dist(spec.model_dump())


def _as_matrix(value: Union[List[float], List[List[float]]]) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    return np.diag(array) if array.ndim == 1 else array


def _stage_matrices(value, horizon: int) -> List[np.ndarray]:
    array = np.asarray(value, dtype=float)
    if array.ndim == 3:
        return list(array)
    return [array] * horizon


def _hyperplanes(specs: Sequence[HyperplaneSpec], kind: ConstraintKind, first: int, last: int,
                 section: str) -> List[HalfspaceConstraint]:
    constraints = []
    for j, spec in enumerate(specs):
        lo, hi = spec.stages
        if lo < first or hi > last:
            raise ScenarioError(f"stages must lie within [{first}, {last}]", f"{section}.{j}.stages")
        constraints.extend(HalfspaceConstraint(normal=spec.normal, bound=spec.bound, stage=k, kind=kind, row=j)
                           for k in range(lo, hi + 1))
    return constraints


def _reference(spec: ReferenceSpec, doc: ScenarioFile, horizon: int, n: int) -> np.ndarray:
    if spec.explicit is not None:
        return np.asarray(spec.explicit, dtype=float).ravel()
    dt = doc.system.dt if isinstance(doc.system, DoubleIntegratorSpec) else 1.0
    return waypoint_reference(spec.waypoints, horizon, n, dt, spec.position_indices, spec.velocity_indices)


def build_problem(doc: ScenarioFile, overrides: Optional[Overrides] = None, workers: int = 1) -> SteeringProblem:
    """Convert a validated scenario document into a SteeringProblem.

    Raises:
        ScenarioError: dimensions or values are inconsistent
    """
    overrides = overrides or Overrides()
    system_spec = doc.system
    N = system_spec.horizon
    try:
        if isinstance(system_spec, DoubleIntegratorSpec):
            system = double_integrator(system_spec.dt, N, system_spec.disturbance_entry)
        else:
            system = LtvSystem(A=tuple(_stage_matrices(system_spec.A, N)),
                               B=tuple(_stage_matrices(system_spec.B, N)),
                               D=tuple(_stage_matrices(system_spec.D, N)))
            if system.horizon != N:
                raise DimensionMismatch(f"Got {system.horizon} stages of matrices for horizon {N}")
    except (DimensionMismatch, ValueError) as e:
        raise ScenarioError(str(e), "system") from e
    n, m, p = system.dims

    x0 = [_dist(s) for s in doc.initial_distribution]
    if doc.disturbance.per_stage is not None:
        w_stage: List[ScalarDist] = [_dist(s) for s in doc.disturbance.per_stage]
        if len(w_stage) != p:
            raise ScenarioError(f"need {p} components, got {len(w_stage)}", "disturbance.per_stage")
        w = w_stage * N
    else:
        w = [_dist(s) for s in doc.disturbance.stacked]
    target = TargetDensity(marginals=tuple(_dist(s) for s in doc.target))

    penalties = np.asarray(doc.weights.penalties, dtype=float)
    if overrides.lambda_scale is not None:
        penalties = penalties * overrides.lambda_scale

    q = doc.quadrature
    quadrature = QuadratureSpec(truncation=TruncationMode(q.truncation), upper=q.upper, multiplier=q.multiplier,
                                nodes_per_unit=q.nodes_per_unit, absolute_tolerance=q.absolute_tolerance)
    solver_fields = doc.solver.model_dump()
    if overrides.fixed_risk is not None:
        solver_fields['fixed_risk'] = overrides.fixed_risk
    solver = SolverOptions(workers=workers, **solver_fields)

    state_constraints = _hyperplanes(doc.state_constraints, ConstraintKind.STATE, 1, N, "state_constraints")
    input_constraints = _hyperplanes(doc.input_constraints, ConstraintKind.INPUT, 0, N - 1, "input_constraints")
    try:
        Q = _as_matrix(doc.weights.Q)
        R = _as_matrix(doc.weights.R)
        problem = SteeringProblem(
            system=system,
            x0_dists=tuple(x0),
            w_dists=tuple(w),
            state_constraints=tuple(state_constraints),
            input_constraints=tuple(input_constraints),
            budget_x=doc.thresholds.state,
            budget_u=doc.thresholds.input,
            Q=(Q,) * N,
            R=(R,) * N,
            reference=_reference(doc.reference, doc, N, n),
            target=target,
            penalties=penalties,
            quadrature=quadrature,
            solver=solver,
            terminal_Q=None if doc.weights.terminal_Q is None else _as_matrix(doc.weights.terminal_Q),
        )
    except (DimensionMismatch, ValueError) as e:
        raise ScenarioError(str(e), "scenario") from e

    is_valid, message = validate_problem(problem)
    if not is_valid:
        raise ScenarioError(message, "scenario")
    return problem


def _location(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first['loc']) or "scenario"


def parse_scenario(text: str, source: str = "<string>", overrides: Optional[Overrides] = None,
                   workers: int = 1) -> Scenario:
    """Parse and validate scenario text.

    Raises:
        ScenarioError: malformed JSON (line/column context) or schema violation (field context)
    """
    overrides = overrides or Overrides()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(e.msg, f"{source}: line {e.lineno}, column {e.colno}") from e
    try:
        doc = ScenarioFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ScenarioError(first['msg'], f"{source}: {_location(e)}") from e

    problem = build_problem(doc, overrides, workers)
    mc_fields = doc.mc.model_dump(exclude={'ks_tolerances'})
    if overrides.seed is not None:
        mc_fields['seed'] = overrides.seed
    if overrides.mc_samples is not None:
        mc_fields['sample_count'] = overrides.mc_samples
    try:
        mc = McConfig(workers=workers, chunk_size=load_settings().mc_chunk, **mc_fields)
    except ValueError as e:
        raise ScenarioError(str(e), f"{source}: mc") from e
    ks_tolerances = doc.mc.ks_tolerances
    if ks_tolerances is not None and len(ks_tolerances) != problem.dims[0]:
        raise ScenarioError(f"need {problem.dims[0]} tolerances", f"{source}: mc.ks_tolerances")
    sha = hashlib.sha256(text.encode('utf-8')).hexdigest()
    logger.info(f"Loaded scenario '{doc.name}' from {source} (sha256 {sha[:12]})")
    return Scenario(name=doc.name, text=text, sha256=sha, document=doc, problem=problem, mc=mc,
                    ks_tolerances=ks_tolerances, source=source, overrides=overrides)


def resolve_scenario_path(name_or_path: Union[str, Path]) -> Path:
    """A path as given, or a bundled scenario name such as 'gaussian'."""
    path = Path(name_or_path)
    if path.exists():
        return path
    bundled = load_settings().scenario_dir / f"{name_or_path}.json"
    if bundled.exists():
        return bundled
    raise ScenarioError(f"No such scenario file or bundled scenario: {name_or_path}")


def load_scenario(name_or_path: Union[str, Path], overrides: Optional[Overrides] = None,
                  workers: int = 1) -> Scenario:
    """Read a scenario file from disk (or the bundled directory) and validate it."""
    path = resolve_scenario_path(name_or_path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ScenarioError(f"Cannot read scenario: {e}", str(path)) from e
    return parse_scenario(text, str(path), overrides, workers)


def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    """The validated document as plain JSON data, lambda under its file name."""
    return scenario.document.model_dump(by_alias=True, mode='json')
