"""Trapezoidal grids and truncation rules for characteristic-function integrals."""
import logging
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np

from ..shared_libraries.models import QuadratureSpec, TruncationMode

logger = logging.getLogger(__name__)


@lru_cache(maxsize=256)
def _cached_grid(upper: float, intervals: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes = np.linspace(0.0, upper, intervals + 1)
    weights = np.full(intervals + 1, upper / intervals)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def trapezoid_grid(upper: float, nodes_per_unit: int, max_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Composite trapezoid nodes and weights on [0, upper].

    Grids are cached so every constraint evaluated at the same iterate with
    the same truncation shares one array.

    Args:
        upper (float): right end of the interval
        nodes_per_unit (int): nodes per unit length
        max_nodes (int): hard cap on the node count

    Returns:
        Tuple[np.ndarray, np.ndarray]: (nodes, weights), read-only
    """
    intervals = int(np.ceil(upper * nodes_per_unit))
    if intervals + 1 > max_nodes:
        logger.warning(f"Trapezoid grid capped at {max_nodes} nodes (requested {intervals + 1})")
        intervals = max_nodes - 1
    # round the upper limit to 1e-9 so nearly equal truncations share a grid
    return _cached_grid(round(float(upper), 9), max(intervals, 1))


def envelope_upper(envelope: Callable[[float], float], tolerance: float, max_upper: float) -> float:
    """Smallest standardized frequency where a decreasing envelope drops below tolerance.

    Args:
        envelope: bound on |cf| as a function of standardized frequency
        tolerance: target bound
        max_upper: cap returned when the envelope never gets there

    Returns:
        float: truncation point in standardized frequency
    """
    hi = 1.0
    while envelope(hi) > tolerance:
        hi *= 2.0
        if hi >= max_upper:
            logger.debug(f"Envelope still above {tolerance:g} at the cap {max_upper:g}")
            return max_upper
    lo = hi / 2.0 if hi > 1.0 else 0.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if envelope(mid) > tolerance:
            lo = mid
        else:
            hi = mid
    return hi


def standardized_upper(spec: QuadratureSpec, envelope: Callable[[float], float]) -> float:
    """Truncation point in standardized frequency for the given settings."""
    if spec.truncation == TruncationMode.FIXED_UPPER:
        return float(spec.upper)
    upper = spec.multiplier * envelope_upper(envelope, spec.absolute_tolerance, spec.max_upper)
    return float(min(upper, spec.max_upper))
