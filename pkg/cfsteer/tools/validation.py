"""Validation tools for steering problems and emitted artifacts."""
from typing import Iterable, Sequence, Tuple

import numpy as np
import pandas as pd

from ..shared_libraries.models import SteeringProblem

_SYMMETRY_TOLERANCE = 1e-9


def validate_stage_weights(Q: Sequence[np.ndarray], R: Sequence[np.ndarray]) -> Tuple[bool, str]:
    """Validate the stage weights: Q_k symmetric PSD, R_k symmetric PD.

    Args:
        Q (Sequence[np.ndarray]): state weights per stage
        R (Sequence[np.ndarray]): input weights per stage

    Returns:
        Tuple[bool, str]: (is_valid, error_message)
    """
    for k, q in enumerate(Q):
        if not np.allclose(q, q.T, atol=_SYMMETRY_TOLERANCE):
            return False, f"Q_{k} must be symmetric"
        if np.min(np.linalg.eigvalsh(q)) < -_SYMMETRY_TOLERANCE:
            return False, f"Q_{k} must be positive semidefinite"
    for k, r in enumerate(R):
        if not np.allclose(r, r.T, atol=_SYMMETRY_TOLERANCE):
            return False, f"R_{k} must be symmetric"
        if np.min(np.linalg.eigvalsh(r)) <= 0:
            return False, f"R_{k} must be positive definite"
    return True, ""


def validate_penalties(penalties: Iterable[float]) -> Tuple[bool, str]:
    """Validate the matching weights lambda_i >= 0."""
    values = np.asarray(list(penalties), dtype=float)
    if not np.all(np.isfinite(values)):
        return False, "lambda weights must be finite"
    if np.any(values < 0):
        return False, "lambda weights must be >= 0"
    return True, ""


def validate_initial_state(problem: SteeringProblem) -> Tuple[bool, str]:
    """The initial mean must satisfy the state hyperplanes of the earliest constrained stage.

    Returns:
        Tuple[bool, str]: (is_valid, error_message)
    """
    if not problem.state_constraints:
        return True, ""
    first = min(hc.stage for hc in problem.state_constraints)
    mean = np.array([d.mean() for d in problem.x0_dists])
    for hc in problem.state_constraints:
        if hc.stage == first and hc.normal @ mean > hc.bound:
            return False, (f"Initial mean violates {hc.label}: "
                           f"{hc.normal @ mean:.6g} > {hc.bound:.6g}")
    return True, ""


def validate_problem(problem: SteeringProblem) -> Tuple[bool, str]:
    """Run every problem-level check; the first failure wins."""
    for is_valid, message in (
        validate_stage_weights(problem.Q, problem.R),
        validate_penalties(problem.penalties),
        validate_initial_state(problem),
    ):
        if not is_valid:
            return False, message
    if problem.terminal_Q is not None:
        return validate_stage_weights([problem.terminal_Q], [])
    return True, ""


def validate_columns(frame: pd.DataFrame, required: Sequence[str], name: str) -> Tuple[bool, str]:
    """Validate that an artifact table carries the expected columns."""
    missing = [c for c in required if c not in frame.columns]
    if missing:
        return False, f"{name} is missing columns: {', '.join(missing)}"
    return True, ""
