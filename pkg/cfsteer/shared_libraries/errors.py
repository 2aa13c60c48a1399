"""Exceptions raised by cfsteer."""
from typing import Any, List, Optional


class CfsteerError(Exception):
    """Base class for all cfsteer errors."""


class DegenerateDistribution(CfsteerError):
    """A linear combination is almost surely constant, so it has no density."""

    def __init__(self, value: float):
        super().__init__(f"Distribution is degenerate at {value!r}")
        self.value = value


class DimensionMismatch(CfsteerError):
    """Array shapes do not agree with the system dimensions."""


class ScenarioError(CfsteerError):
    """A scenario file could not be parsed or failed validation.

    Attributes:
        context: field path or "line L, column C" where the problem was found
    """

    def __init__(self, message: str, context: Optional[str] = None):
        text = f"{context}: {message}" if context else message
        super().__init__(text)
        self.context = context


class SolverError(CfsteerError):
    """The optimizer stopped without a validated solution.

    Attributes:
        solution: best iterate found, with diagnostics filled in
    """

    def __init__(self, message: str, solution: Any = None):
        super().__init__(message)
        self.solution = solution


class Infeasible(SolverError):
    """No iterate reached the feasibility tolerance."""


class MaxIterations(SolverError):
    """The outer iteration budget ran out before stationarity."""


class NumericalBreakdown(SolverError):
    """A non-finite objective, constraint or gradient value was produced."""


class ConsistencyFailure(CfsteerError):
    """Emitted artifacts do not satisfy the re-asserted invariants."""

    def __init__(self, failed_checks: List[str]):
        super().__init__("Failed checks: " + ", ".join(failed_checks))
        self.failed_checks = failed_checks


class ArtifactError(CfsteerError):
    """An emitted artifact is missing or unreadable."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
