"""Terminal density matching through L1 distances between characteristic functions."""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..shared_libraries.constants import SUP_DEVIATION_GRID, TAIL_QUADRATURE_NODES
from ..shared_libraries.errors import DegenerateDistribution, DimensionMismatch
from ..shared_libraries.models import (
    Controller, LiftedSystem, LinComboCF, MatchReport, QuadratureSpec, ScalarDist, TargetDensity
)
from . import cf
from .lift import lincombo_of_row, state_map
from .quadrature import standardized_upper, trapezoid_grid

logger = logging.getLogger(__name__)

Density = Union[LinComboCF, ScalarDist]


def as_lincombo(density: Density) -> LinComboCF:
    if isinstance(density, LinComboCF):
        return density
    return LinComboCF(coefficients=np.ones(1), components=(density,), offset=0.0)


def terminal_row(lifted: LiftedSystem, i: int) -> np.ndarray:
    if not 0 <= i < lifted.n:
        raise DimensionMismatch(f"Terminal dimension {i} outside 0..{lifted.n - 1}")
    return lifted.E[lifted.horizon][i]


def terminal_marginal_cf(lifted: LiftedSystem, ctrl: Controller, x0_dists: Sequence[ScalarDist],
                         w_dists: Sequence[ScalarDist], i: int) -> LinComboCF:
    """Component i of the terminal state as a linear combination (dimensions are 0-based)."""
    return lincombo_of_row(terminal_row(lifted, i), lifted, ctrl, x0_dists, w_dists)


def _frequency_grid(lcs: Sequence[LinComboCF], q: QuadratureSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Raw-frequency grid resolving every CF in lcs.

    The step follows the widest scale involved (spread or mean gap) and
    the truncation follows the slowest-decaying envelope.
    """
    sds = [lc.std() for lc in lcs]
    means = [lc.mean() for lc in lcs]
    if min(sds) < 1e-12:
        raise DegenerateDistribution(means[int(np.argmin(sds))])
    scale = max(max(sds), max(means) - min(means))
    upper = standardized_upper(q, lambda tau: max(cf.lincombo_envelope(lc, tau / scale) for lc in lcs))
    tau, weights = trapezoid_grid(upper, q.nodes_per_unit, q.max_nodes)
    return tau / scale, weights / scale


def cf_l1_distance(a: Density, b: Density, q: Optional[QuadratureSpec] = None) -> float:
    """(1/2 pi) int |cf_a(t) - cf_b(t)| dt over the real line.

    The integrand is even, so this integrates [0, infinity) and doubles.
    """
    return distance_with_gradient(as_lincombo(a), as_lincombo(b), q, need_gradient=False)[0]


@lru_cache(maxsize=4)
def _legendre(count: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(count)
    return 0.5 * (x + 1.0), 0.5 * w


def tail_nodes(upper: float, count: int = TAIL_QUADRATURE_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights for [upper, infinity) through t = upper / u.

    Algebraic tails such as 1 / (1 + b^2 t^2) become smooth in u, so the
    part of the integral beyond the truncation point is integrated rather
    than dropped.
    """
    u, wu = _legendre(count)
    return upper / u, wu * upper / (u * u)


def distance_with_gradient(a: LinComboCF, b: LinComboCF, q: Optional[QuadratureSpec] = None,
                           need_gradient: bool = True) -> Tuple[float, np.ndarray, float]:
    """CF distance and its sensitivity to the coefficients and offset of `a`.

    Trapezoid on [0, T] plus Gauss-Legendre on the tail. |cf_a - cf_b| has
    slope |mean_a - mean_b| at t = 0 where its even extension has a kink,
    so the Euler-Maclaurin endpoint term h^2/12 * |mean_a - mean_b| is added.

    Returns:
        Tuple[float, np.ndarray, float]: (distance, d/d coefficients of a, d/d offset of a)
    """
    q = q or QuadratureSpec()
    t, w = _frequency_grid([a, b], q)
    kink = (t[1] - t[0]) ** 2 / 12.0
    gap = a.mean() - b.mean()
    t_tail, w_tail = tail_nodes(t[-1])
    t, w = np.concatenate([t, t_tail]), np.concatenate([w, w_tail])
    active, full, others = cf.product_terms(a, t)
    phase = np.exp(1j * a.offset * t)
    phi_a = phase * full
    diff = phi_a - cf.lincombo_cf_eval(b, t)
    magnitude = np.abs(diff)
    distance = float((np.dot(w, magnitude) + kink * abs(gap)) / np.pi)
    grad = np.zeros(a.coefficients.shape[0])
    grad_offset = 0.0
    if need_gradient:
        # subnormal magnitudes overflow the unit phase
        unit = np.divide(np.conj(diff), magnitude, out=np.zeros_like(diff),
                         where=magnitude > np.finfo(float).tiny)
        for row, (i, c, dist) in enumerate(active):
            d_phi = phase * t * cf.cf_derivative(dist, c * t) * others[row]
            grad[i] = np.dot(w, (unit * d_phi).real)
        means = np.array([d.mean() for d in a.components])
        grad = (grad + kink * np.sign(gap) * means) / np.pi
        grad_offset = float((np.dot(w, (unit * 1j * t * phi_a).real) + kink * np.sign(gap)) / np.pi)
    return distance, grad, grad_offset


def marginal_distance(lifted: LiftedSystem, ctrl: Controller, x0_dists: Sequence[ScalarDist],
                      w_dists: Sequence[ScalarDist], target: TargetDensity, i: int,
                      q: Optional[QuadratureSpec] = None) -> float:
    """L1 CF distance between terminal marginal i and its target."""
    lc = terminal_marginal_cf(lifted, ctrl, x0_dists, w_dists, i)
    return cf_l1_distance(lc, target.marginals[i], q)


def comparison_grid(a: LinComboCF, b: LinComboCF, points: int = SUP_DEVIATION_GRID['points'],
                    sigmas: float = SUP_DEVIATION_GRID['sigmas']) -> np.ndarray:
    """Evenly spaced grid covering mean +/- sigmas * sd of both densities."""
    lo = min(a.mean() - sigmas * a.std(), b.mean() - sigmas * b.std())
    hi = max(a.mean() + sigmas * a.std(), b.mean() + sigmas * b.std())
    return np.linspace(lo, hi, points)


def density_values(density: Density, grid: np.ndarray, q: Optional[QuadratureSpec] = None) -> np.ndarray:
    """Closed-form pdf for catalog members, Fourier inversion for linear combinations."""
    if isinstance(density, ScalarDist):
        return np.asarray(cf.pdf(density, grid), dtype=float)
    return cf.invert_pdf(density, grid, q)


def density_sup_deviation(a: Density, b: Density, q: Optional[QuadratureSpec] = None,
                          grid: Optional[np.ndarray] = None) -> float:
    """max over the grid of |pdf_a - pdf_b|."""
    if grid is None:
        grid = comparison_grid(as_lincombo(a), as_lincombo(b))
    return float(np.max(np.abs(density_values(a, grid, q) - density_values(b, grid, q))))


def sup_deviation(lifted: LiftedSystem, ctrl: Controller, x0_dists: Sequence[ScalarDist],
                  w_dists: Sequence[ScalarDist], target: TargetDensity, i: int,
                  q: Optional[QuadratureSpec] = None, grid: Optional[np.ndarray] = None) -> float:
    """Largest gap between the achieved terminal marginal density and the target's."""
    lc = terminal_marginal_cf(lifted, ctrl, x0_dists, w_dists, i)
    return density_sup_deviation(lc, target.marginals[i], q, grid)


def joint_bound(distances: Sequence[float]) -> float:
    """(1/2 pi)^(n-1) * sum of the marginal distances."""
    d = np.asarray(distances, dtype=float)
    if np.any(d < 0):
        raise ValueError("Distances must be nonnegative")
    return float((1.0 / (2.0 * np.pi)) ** (d.shape[0] - 1) * d.sum())


def joint_distance_2d(lifted: LiftedSystem, ctrl: Controller, x0_dists: Sequence[ScalarDist],
                      w_dists: Sequence[ScalarDist], target: TargetDensity,
                      q: Optional[QuadratureSpec] = None) -> float:
    """(1/2 pi)^2 times the integral over R^2 of |joint CF - target CF|.

    Tensor-grid trapezoid over t1 >= 0 and all t2, doubled by Hermitian
    symmetry. Only defined for two-dimensional states.
    """
    if lifted.n != 2:
        raise DimensionMismatch("Direct joint distance is only evaluated for n = 2")
    q = q or QuadratureSpec()
    M_x0, M_W, const = state_map(lifted, ctrl)
    rows = slice(lifted.horizon * 2, lifted.horizon * 2 + 2)
    coefficients = np.hstack([M_x0[rows], M_W[rows]])
    offsets = const[rows]
    components = tuple(x0_dists) + tuple(w_dists)
    node_density = max(q.nodes_per_unit // 4, 8)
    axes = []
    for i in range(2):
        pair = [terminal_marginal_cf(lifted, ctrl, x0_dists, w_dists, i), as_lincombo(target.marginals[i])]
        t, w = _frequency_grid(pair, QuadratureSpec(
            truncation=q.truncation, upper=q.upper, multiplier=q.multiplier,
            nodes_per_unit=node_density, absolute_tolerance=max(q.absolute_tolerance, 1e-8),
            max_upper=q.max_upper, max_nodes=4096))
        axes.append((t, w))
    (t1, w1), (t2, w2) = axes
    t2_full = np.concatenate([-t2[:0:-1], t2])
    w2_full = np.concatenate([w2[:0:-1], w2])
    w2_full[t2.shape[0] - 1] = 2.0 * w2[0]
    T1, T2 = np.meshgrid(t1, t2_full, indexing='ij')
    achieved = np.exp(1j * (T1 * offsets[0] + T2 * offsets[1]))
    for j, dist in enumerate(components):
        c = T1 * coefficients[0, j] + T2 * coefficients[1, j]
        if coefficients[0, j] != 0.0 or coefficients[1, j] != 0.0:
            achieved = achieved * cf.cf_eval(dist, c)
    desired = np.outer(cf.cf_eval(target.marginals[0], t1), cf.cf_eval(target.marginals[1], t2_full))
    integral = 2.0 * (w1 @ np.abs(achieved - desired) @ w2_full)
    return float(integral / (2.0 * np.pi) ** 2)


def cf_l1_norm(density: Density, q: Optional[QuadratureSpec] = None) -> float:
    """int |cf(t)| dt over the real line."""
    lc = as_lincombo(density)
    t, w = _frequency_grid([lc], q or QuadratureSpec())
    t_tail, w_tail = tail_nodes(t[-1])
    t, w = np.concatenate([t, t_tail]), np.concatenate([w, w_tail])
    return float(2.0 * np.dot(w, np.abs(cf.lincombo_cf_eval(lc, t))))


@dataclass
class JointBoundReport:
    """Summed marginal bound against the direct joint distance.

    `guaranteed` is set when the achieved terminal coordinates are
    independent and the CF norms make the summed bound a true upper bound.
    """
    bound: float
    direct: Optional[float] = None
    guaranteed: Optional[bool] = None

    @property
    def holds(self) -> Optional[bool]:
        if self.direct is None:
            return None
        return self.direct <= self.bound + 1e-6

    @property
    def failed(self) -> bool:
        return self.holds is False


def _bound_guaranteed(achieved: Sequence[LinComboCF], target: TargetDensity, distances: Sequence[float],
                      q: Optional[QuadratureSpec]) -> bool:
    """Whether splitting the joint CF difference by the triangle inequality implies the summed bound.

    With independent coordinates the joint distance is at most
    (1/2 pi) min(D_1 |cf_2|_1 + D_2 |psi_1|_1, D_1 |psi_2|_1 + D_2 |cf_1|_1).
    """
    shared = (achieved[0].coefficients != 0.0) & (achieved[1].coefficients != 0.0)
    if np.any(shared):
        return False
    d1, d2 = distances
    norms = [cf_l1_norm(lc, q) for lc in achieved]
    targets = [cf_l1_norm(marginal, q) for marginal in target.marginals]
    split = min(d1 * norms[1] + d2 * targets[0], d1 * targets[1] + d2 * norms[0])
    return bool(split <= d1 + d2)


def joint_bound_check(distances: Sequence[float], lifted: Optional[LiftedSystem] = None,
                      ctrl: Optional[Controller] = None, x0_dists: Sequence[ScalarDist] = (),
                      w_dists: Sequence[ScalarDist] = (), target: Optional[TargetDensity] = None,
                      q: Optional[QuadratureSpec] = None) -> JointBoundReport:
    """Summed marginal bound on the joint distance, checked directly when n = 2."""
    report = JointBoundReport(bound=joint_bound(distances))
    if lifted is not None and lifted.n == 2 and ctrl is not None and target is not None:
        achieved = [terminal_marginal_cf(lifted, ctrl, x0_dists, w_dists, i) for i in range(2)]
        report.guaranteed = _bound_guaranteed(achieved, target, distances, q)
        report.direct = joint_distance_2d(lifted, ctrl, x0_dists, w_dists, target, q)
        if report.failed:
            kind = "guaranteed" if report.guaranteed else "heuristic"
            logger.warning(f"Direct joint distance {report.direct:.6g} exceeds the {kind} bound {report.bound:.6g}")
    return report


def product_difference_bound(a: Sequence[complex], b: Sequence[complex]) -> Tuple[float, float]:
    """(|prod a - prod b|, sum |a_i - b_i|) for numbers in the closed unit disk."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape:
        raise DimensionMismatch("Sequences must have equal length")
    if np.any(np.abs(a) > 1 + 1e-12) or np.any(np.abs(b) > 1 + 1e-12):
        raise ValueError("Entries must lie in the closed unit disk")
    return float(abs(np.prod(a) - np.prod(b))), float(np.sum(np.abs(a - b)))


def match_report(lifted: LiftedSystem, ctrl: Controller, x0_dists: Sequence[ScalarDist],
                 w_dists: Sequence[ScalarDist], target: TargetDensity,
                 q: Optional[QuadratureSpec] = None, thresholds: Optional[List[float]] = None
                 ) -> MatchReport:
    """Per-dimension distances and density deviations at a controller."""
    distances, deviations = [], []
    for i in range(lifted.n):
        try:
            distances.append(marginal_distance(lifted, ctrl, x0_dists, w_dists, target, i, q))
            deviations.append(sup_deviation(lifted, ctrl, x0_dists, w_dists, target, i, q))
        except DegenerateDistribution as e:
            logger.warning(f"Terminal dimension {i} is degenerate at {e.value:.6g}; distance is unbounded")
            distances.append(float('inf'))
            deviations.append(float('inf'))
    finite = [d for d in distances if np.isfinite(d)]
    if len(finite) != len(distances):
        return MatchReport(distances=distances, sup_deviations=deviations, joint_bound=float('inf'),
                           thresholds=thresholds)
    joint = joint_bound_check(distances, lifted, ctrl, x0_dists, w_dists, target, q)
    return MatchReport(distances=distances, sup_deviations=deviations, joint_bound=joint.bound,
                       thresholds=thresholds, joint_direct=joint.direct, joint_guaranteed=joint.guaranteed)
