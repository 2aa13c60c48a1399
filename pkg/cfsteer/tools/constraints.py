"""Boole decomposition of joint polytopic chance constraints and their cdf margins."""
import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..shared_libraries.errors import DegenerateDistribution
from ..shared_libraries.models import (
    ConstraintKind, Controller, HalfspaceConstraint, LiftedSystem, LinComboCF, QuadratureSpec,
    RiskAllocation, ScalarDist, SteeringProblem
)
from .cf import cdf_with_gradient
from .lift import lincombo_of_row, row_chain_rule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConstraintSlot:
    """One hyperplane bound to its risk share."""
    constraint: HalfspaceConstraint
    slot: int
    uniform_share: float


@dataclass
class MarginEvaluation:
    margin: float
    cdf: float
    dK: Optional[np.ndarray] = None
    dv: Optional[np.ndarray] = None


def boole_decompose(problem: SteeringProblem) -> List[ConstraintSlot]:
    """Split the joint chance constraints into per-hyperplane ones.

    State hyperplanes come first (stages 1..N), then input hyperplanes
    (stages 0..N-1); slots are numbered within each kind.

    Args:
        problem (SteeringProblem): the instance

    Returns:
        List[ConstraintSlot]: one entry per (j, k) pair
    """
    slots = []
    for kind, items, budget in (
        (ConstraintKind.STATE, problem.state_constraints, problem.budget_x),
        (ConstraintKind.INPUT, problem.input_constraints, problem.budget_u),
    ):
        ordered = sorted(items, key=lambda hc: (hc.stage, hc.row))
        share = budget / len(ordered) if ordered else 0.0
        slots.extend(ConstraintSlot(hc, i, share) for i, hc in enumerate(ordered))
    logger.debug(f"Boole decomposition produced {len(slots)} constraints")
    return slots


def uniform_allocation(problem: SteeringProblem, slots: Sequence[ConstraintSlot]) -> RiskAllocation:
    """Every hyperplane of a kind gets the same share of that kind's budget."""
    state = [s.uniform_share for s in slots if s.constraint.kind == ConstraintKind.STATE]
    inputs = [s.uniform_share for s in slots if s.constraint.kind == ConstraintKind.INPUT]
    return RiskAllocation(deltas_x=np.array(state), deltas_u=np.array(inputs),
                          budget_x=problem.budget_x, budget_u=problem.budget_u)


def constraint_row(hc: HalfspaceConstraint, lifted: LiftedSystem) -> np.ndarray:
    """The functional on X (state) or U (input) that the hyperplane bounds."""
    if hc.kind == ConstraintKind.STATE:
        return lifted.E[hc.stage].T @ hc.normal
    return lifted.F[hc.stage].T @ hc.normal


def margin_with_gradient(hc: HalfspaceConstraint, lifted: LiftedSystem, ctrl: Controller,
                         x0_dists: Sequence[ScalarDist], w_dists: Sequence[ScalarDist],
                         delta: float, q: QuadratureSpec, need_gradient: bool = True
                         ) -> MarginEvaluation:
    """cdf(bound) - (1 - delta) for one hyperplane, with its (K, v) gradient.

    A degenerate functional is a point mass, compared with the bound
    directly. When it sits past the bound the margin keeps falling linearly
    with the excess, -(1 - delta) - (value - bound), so the gradient still
    points back toward the feasible side.
    """
    row = constraint_row(hc, lifted)
    lc = lincombo_of_row(row, lifted, ctrl, x0_dists, w_dists, hc.kind)
    try:
        prob, grad_c, density = cdf_with_gradient(lc, hc.bound, q, need_gradient=need_gradient)
    except DegenerateDistribution as e:
        return _point_mass_margin(hc, row, lifted, lc, e.value, delta, need_gradient)
    result = MarginEvaluation(margin=prob - (1.0 - delta), cdf=prob)
    if need_gradient:
        # the offset enters as y - offset, so d cdf / d offset = -density
        result.dK, result.dv = row_chain_rule(row, lifted, grad_c, -density, hc.kind)
    return result


def _point_mass_margin(hc: HalfspaceConstraint, row: np.ndarray, lifted: LiftedSystem, lc: LinComboCF,
                       value: float, delta: float, need_gradient: bool) -> MarginEvaluation:
    excess = value - hc.bound
    if excess <= 0.0:
        result = MarginEvaluation(margin=delta, cdf=1.0)
        grad_c, grad_offset = np.zeros(lc.coefficients.shape[0]), 0.0
    else:
        result = MarginEvaluation(margin=-(1.0 - delta) - excess, cdf=0.0)
        grad_c = -np.array([d.mean() for d in lc.components])
        grad_offset = -1.0
    if need_gradient:
        result.dK, result.dv = row_chain_rule(row, lifted, grad_c, grad_offset, hc.kind)
    return result


def state_cc_margin(hc: HalfspaceConstraint, lifted: LiftedSystem, ctrl: Controller,
                    x0_dists: Sequence[ScalarDist], w_dists: Sequence[ScalarDist],
                    delta: float, q: QuadratureSpec) -> float:
    """Margin of a state hyperplane; nonnegative exactly when it is satisfied."""
    if hc.kind != ConstraintKind.STATE:
        raise ValueError(f"{hc.label} is not a state constraint")
    return margin_with_gradient(hc, lifted, ctrl, x0_dists, w_dists, delta, q, need_gradient=False).margin


def input_cc_margin(hc: HalfspaceConstraint, lifted: LiftedSystem, ctrl: Controller,
                    x0_dists: Sequence[ScalarDist], w_dists: Sequence[ScalarDist],
                    delta: float, q: QuadratureSpec) -> float:
    """Margin of an input hyperplane; nonnegative exactly when it is satisfied."""
    if hc.kind != ConstraintKind.INPUT:
        raise ValueError(f"{hc.label} is not an input constraint")
    return margin_with_gradient(hc, lifted, ctrl, x0_dists, w_dists, delta, q, need_gradient=False).margin


def slot_deltas(slots: Sequence[ConstraintSlot], risk: RiskAllocation) -> np.ndarray:
    """Risk share of each slot in decomposition order."""
    return np.array([
        risk.deltas_x[s.slot] if s.constraint.kind == ConstraintKind.STATE else risk.deltas_u[s.slot]
        for s in slots
    ])


def evaluate_margins(problem: SteeringProblem, lifted: LiftedSystem, ctrl: Controller,
                     slots: Sequence[ConstraintSlot], risk: RiskAllocation,
                     need_gradient: bool = False, executor: Optional[Executor] = None
                     ) -> List[MarginEvaluation]:
    """Evaluate every decomposed constraint at one controller.

    Evaluations are independent, so they may fan out over an executor.
    """
    deltas = slot_deltas(slots, risk)

    def _one(args: Tuple[ConstraintSlot, float]) -> MarginEvaluation:
        slot, delta = args
        return margin_with_gradient(slot.constraint, lifted, ctrl, problem.x0_dists, problem.w_dists,
                                    delta, problem.quadrature, need_gradient)

    work = list(zip(slots, deltas))
    if executor is None:
        return [_one(item) for item in work]
    return list(executor.map(_one, work))
