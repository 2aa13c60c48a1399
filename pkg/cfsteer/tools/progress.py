"""Progress reporting for the steering solver."""
from typing import Any, Dict

from ..shared_libraries.models import SolverDiagnostics


def format_iteration(iteration: int, objective: float, cost: float, violation: float,
                     stationarity: float, penalty: float) -> str:
    """Format one outer iteration as a single log line.

    Args:
        iteration (int): outer iteration number, starting at 1
        objective (float): objective J + sum lambda_i D_i at the iterate
        cost (float): quadratic cost J at the iterate
        violation (float): largest constraint violation
        stationarity (float): projected Lagrangian gradient norm
        penalty (float): current penalty parameter

    Returns:
        str: formatted line
    """
    return (f"outer {iteration:4d} | objective {objective:12.6f} | J {cost:12.6f} | "
            f"violation {violation:9.2e} | stationarity {stationarity:9.2e} | penalty {penalty:8.1e}")


def get_solver_progress(diagnostics: SolverDiagnostics, max_outer_iterations: int) -> Dict[str, Any]:
    """Summarize where a solve stands.

    Returns:
        Dict[str, Any]: Progress information including:
            - iterations: outer iterations done
            - remaining_iterations: outer iterations left in the budget
            - progress_percentage: share of the budget used
            - last_objective: latest objective value, None before the first iteration
            - status: see get_solver_status
    """
    iterations = diagnostics.iterations
    return {
        "iterations": iterations,
        "remaining_iterations": max(max_outer_iterations - iterations, 0),
        "progress_percentage": (iterations / max_outer_iterations * 100) if max_outer_iterations > 0 else 0,
        "last_objective": diagnostics.objective_history[-1] if diagnostics.objective_history else None,
        "status": get_solver_status(diagnostics),
    }


def get_solver_status(diagnostics: SolverDiagnostics) -> str:
    """Current status (not started, running, converged, or the failure status)."""
    if diagnostics.converged:
        return "converged"
    if diagnostics.status in ("infeasible", "max_iterations", "numerical_breakdown"):
        return diagnostics.status
    if diagnostics.iterations == 0:
        return "not started"
    return "running"
