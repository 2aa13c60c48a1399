"""Steering objective: exact quadratic cost, matching penalty and their gradients."""
import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import linalg

from ..shared_libraries.errors import DegenerateDistribution, DimensionMismatch
from ..shared_libraries.models import (
    ConstraintKind, Controller, LiftedSystem, RiskAllocation, Solution, SolverDiagnostics,
    SteeringProblem, causal_mask
)
from .constraints import boole_decompose, evaluate_margins, margin_with_gradient, slot_deltas, uniform_allocation
from .lift import lift, lifted_moments, row_chain_rule
from .matching import as_lincombo, distance_with_gradient, terminal_marginal_cf, terminal_row

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Decision vector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecisionLayout:
    """Flat decision vector [causal entries of K, v, deltas_x, deltas_u].

    With `with_risk` False the vector stops after v.
    """
    horizon: int
    n: int
    m: int
    state_slots: int = 0
    input_slots: int = 0
    with_risk: bool = False

    @cached_property
    def mask(self) -> np.ndarray:
        return causal_mask(self.horizon, self.n, self.m)

    @property
    def gain_size(self) -> int:
        return int(self.mask.sum())

    @property
    def control_size(self) -> int:
        return self.gain_size + self.horizon * self.m

    @property
    def size(self) -> int:
        if not self.with_risk:
            return self.control_size
        return self.control_size + self.state_slots + self.input_slots

    def pack(self, ctrl: Controller, risk: Optional[RiskAllocation] = None) -> np.ndarray:
        parts = [ctrl.K[self.mask], ctrl.v]
        if self.with_risk:
            if risk is None:
                raise ValueError("This layout carries risk shares; pass a RiskAllocation")
            parts += [risk.deltas_x, risk.deltas_u]
        return np.concatenate(parts)

    def pack_gradient(self, dK: np.ndarray, dv: np.ndarray, d_deltas_x: Optional[np.ndarray] = None,
                      d_deltas_u: Optional[np.ndarray] = None) -> np.ndarray:
        parts = [dK[self.mask], dv]
        if self.with_risk:
            parts.append(np.zeros(self.state_slots) if d_deltas_x is None else d_deltas_x)
            parts.append(np.zeros(self.input_slots) if d_deltas_u is None else d_deltas_u)
        return np.concatenate(parts)

    def controller(self, z: np.ndarray) -> Controller:
        if z.shape[0] != self.size:
            raise DimensionMismatch(f"Decision vector has length {z.shape[0]}, expected {self.size}")
        K = np.zeros(self.mask.shape)
        K[self.mask] = z[:self.gain_size]
        return Controller(K=K, v=z[self.gain_size:self.control_size], n=self.n, m=self.m)

    def deltas(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        start = self.control_size
        return z[start:start + self.state_slots], z[start + self.state_slots:self.size]


# ---------------------------------------------------------------------------
# Quadratic cost
# ---------------------------------------------------------------------------

def stacked_weights(problem: SteeringProblem) -> Tuple[np.ndarray, np.ndarray]:
    """Block-diagonal state and input weights over the horizon.

    The terminal state block is `terminal_Q` when given and zero otherwise.
    """
    n, _, _ = problem.dims
    terminal = problem.terminal_Q if problem.terminal_Q is not None else np.zeros((n, n))
    Q_bar = linalg.block_diag(*problem.Q, terminal)
    R_bar = linalg.block_diag(*problem.R)
    return 0.5 * (Q_bar + Q_bar.T), 0.5 * (R_bar + R_bar.T)


def _cost_pieces(problem: SteeringProblem, lifted: LiftedSystem, ctrl: Controller):
    Q_bar, R_bar = stacked_weights(problem)
    mean, cov = lifted_moments(lifted, problem.x0_dists, problem.w_dists)
    P = np.eye(lifted.A.shape[0]) + lifted.B @ ctrl.K
    error = P @ mean + lifted.B @ ctrl.v - problem.reference
    u_mean = ctrl.K @ mean + ctrl.v
    return Q_bar, R_bar, mean, cov, P, error, u_mean


def cost_exact(problem: SteeringProblem, ctrl: Controller, lifted: Optional[LiftedSystem] = None) -> float:
    """Exact expectation of (X - X_d)' Q (X - X_d) + U' R U under the controller.

    Args:
        problem (SteeringProblem): the instance
        ctrl (Controller): the controller
        lifted (LiftedSystem, optional): precomputed lift of problem.system

    Returns:
        float: expected cost
    """
    lifted = lifted or lift(problem.system)
    Q_bar, R_bar, _, cov, P, error, u_mean = _cost_pieces(problem, lifted, ctrl)
    mean_part = error @ Q_bar @ error + u_mean @ R_bar @ u_mean
    spread_part = np.trace((P.T @ Q_bar @ P + ctrl.K.T @ R_bar @ ctrl.K) @ cov)
    return float(mean_part + spread_part)


def cost_gradient(problem: SteeringProblem, ctrl: Controller,
                  lifted: Optional[LiftedSystem] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """Cost with its gradient, dK masked to the causal pattern.

    Returns:
        Tuple[float, np.ndarray, np.ndarray]: (J, dJ/dK, dJ/dv)
    """
    lifted = lifted or lift(problem.system)
    Q_bar, R_bar, mean, cov, P, error, u_mean = _cost_pieces(problem, lifted, ctrl)
    weighted_error = lifted.B.T @ Q_bar @ error
    weighted_input = R_bar @ u_mean
    dv = 2.0 * (weighted_error + weighted_input)
    dK = 2.0 * (np.outer(weighted_error + weighted_input, mean)
                + lifted.B.T @ Q_bar @ P @ cov + R_bar @ ctrl.K @ cov)
    dK[~causal_mask(lifted.horizon, lifted.n, lifted.m)] = 0.0
    value = error @ Q_bar @ error + u_mean @ R_bar @ u_mean
    value += np.trace((P.T @ Q_bar @ P + ctrl.K.T @ R_bar @ ctrl.K) @ cov)
    return float(value), dK, dv


def lq_initialization(problem: SteeringProblem, lifted: Optional[LiftedSystem] = None) -> Controller:
    """K = 0 and v from deterministic LQ tracking of the mean dynamics.

    Solves (B' Q B + R) v = B' Q (X_d - mean of A x0 + D W).
    """
    lifted = lifted or lift(problem.system)
    Q_bar, R_bar = stacked_weights(problem)
    mean, _ = lifted_moments(lifted, problem.x0_dists, problem.w_dists)
    lhs = lifted.B.T @ Q_bar @ lifted.B + R_bar
    rhs = lifted.B.T @ Q_bar @ (problem.reference - mean)
    v = linalg.solve(lhs, rhs, assume_a='pos')
    N = problem.horizon
    n, m, _ = problem.dims
    return Controller(K=np.zeros((N * m, (N + 1) * n)), v=v, n=n, m=m)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveEvaluation:
    value: float
    cost: float
    distances: List[Optional[float]]
    dK: Optional[np.ndarray] = None
    dv: Optional[np.ndarray] = None


def objective_with_gradient(problem: SteeringProblem, ctrl: Controller,
                            lifted: Optional[LiftedSystem] = None, need_gradient: bool = True,
                            executor: Optional[Executor] = None) -> ObjectiveEvaluation:
    """J plus the weighted marginal distances, with the (K, v) gradient.

    Dimensions with a zero weight are skipped entirely (their distance is
    reported as None).

    Raises:
        DegenerateDistribution: a weighted terminal marginal is almost surely constant
    """
    lifted = lifted or lift(problem.system)
    if need_gradient:
        cost, dK, dv = cost_gradient(problem, ctrl, lifted)
    else:
        cost, dK, dv = cost_exact(problem, ctrl, lifted), None, None
    weighted = [i for i, lam in enumerate(problem.penalties) if lam > 0]

    def _one(i: int):
        lc = terminal_marginal_cf(lifted, ctrl, problem.x0_dists, problem.w_dists, i)
        return distance_with_gradient(lc, as_lincombo(problem.target.marginals[i]),
                                      problem.quadrature, need_gradient)

    results = list(executor.map(_one, weighted)) if executor is not None else [_one(i) for i in weighted]
    distances: List[Optional[float]] = [None] * lifted.n
    value = cost
    for i, (distance, grad_c, grad_offset) in zip(weighted, results):
        lam = problem.penalties[i]
        distances[i] = distance
        value += lam * distance
        if need_gradient:
            gK, gv = row_chain_rule(terminal_row(lifted, i), lifted, grad_c, grad_offset, ConstraintKind.STATE)
            dK += lam * gK
            dv += lam * gv
    return ObjectiveEvaluation(value=float(value), cost=cost, distances=distances, dK=dK, dv=dv)


def objective(problem: SteeringProblem, ctrl: Controller, lifted: Optional[LiftedSystem] = None) -> float:
    """J(K, v) + sum_i lambda_i D_i(K, v)."""
    return objective_with_gradient(problem, ctrl, lifted, need_gradient=False).value


def terminal_distances(problem: SteeringProblem, ctrl: Controller,
                       lifted: Optional[LiftedSystem] = None) -> List[float]:
    """D_i for every terminal dimension, infinite where the marginal is degenerate."""
    lifted = lifted or lift(problem.system)
    distances = []
    for i in range(lifted.n):
        lc = terminal_marginal_cf(lifted, ctrl, problem.x0_dists, problem.w_dists, i)
        try:
            distances.append(distance_with_gradient(lc, as_lincombo(problem.target.marginals[i]),
                                                    problem.quadrature, need_gradient=False)[0])
        except DegenerateDistribution:
            distances.append(float('inf'))
    return distances


def build_solution(problem: SteeringProblem, ctrl: Controller, risk: RiskAllocation,
                   diagnostics: Optional[SolverDiagnostics] = None,
                   lifted: Optional[LiftedSystem] = None) -> Solution:
    """Package a controller with its cost, distances and objective."""
    lifted = lifted or lift(problem.system)
    cost = cost_exact(problem, ctrl, lifted)
    distances = terminal_distances(problem, ctrl, lifted)
    weighted = sum(lam * d for lam, d in zip(problem.penalties, distances) if lam > 0)
    return Solution(controller=ctrl, risk=risk, objective=float(cost + weighted), cost=cost,
                    distances=distances, diagnostics=diagnostics or SolverDiagnostics())


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def central_difference(fun: Callable[[np.ndarray], float], z: np.ndarray, step: float,
                       executor: Optional[Executor] = None) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""

    def _one(j: int) -> float:
        e = np.zeros_like(z)
        e[j] = step
        return (fun(z + e) - fun(z - e)) / (2.0 * step)

    indices = range(z.shape[0])
    values = executor.map(_one, indices) if executor is not None else map(_one, indices)
    return np.fromiter(values, dtype=float, count=z.shape[0])


@dataclass
class GradientCheckEntry:
    name: str
    relative_error: float
    richardson_ratio: float
    error_ratio: float
    flagged: bool


@dataclass
class GradientCheckReport:
    step: float
    entries: List[GradientCheckEntry] = field(default_factory=list)

    @property
    def flagged(self) -> List[str]:
        return [e.name for e in self.entries if e.flagged]

    def max_relative_error(self) -> float:
        return max((e.relative_error for e in self.entries), default=0.0)


def _compare(name: str, analytic: np.ndarray, coarse: np.ndarray, fine: np.ndarray) -> GradientCheckEntry:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(fine), 1e-300)
    relative_error = float(np.linalg.norm(fine - analytic) / scale)
    fine_norm = float(fine @ fine)
    richardson_ratio = float(coarse @ fine / fine_norm) if fine_norm > 0 else 1.0
    coarse_error = np.linalg.norm(coarse - analytic)
    fine_error = np.linalg.norm(fine - analytic)
    error_ratio = float(coarse_error / fine_error) if fine_error > 0 else float('inf')
    flagged = not 0.9 <= richardson_ratio <= 1.1
    if flagged:
        logger.warning(f"Gradient check {name}: step-halving ratio {richardson_ratio:.4f} outside [0.9, 1.1]")
    return GradientCheckEntry(name, relative_error, richardson_ratio, error_ratio, flagged)


def gradient_check(problem: SteeringProblem, ctrl: Controller, risk: Optional[RiskAllocation] = None,
                   step: float = 1e-6, include_margins: bool = True,
                   lifted: Optional[LiftedSystem] = None) -> GradientCheckReport:
    """Compare analytic (K, v) gradients with central differences at steps h and h/2.

    Checks the objective and, when asked, every decomposed chance-constraint
    margin. The relative error uses the h/2 estimate; the step-halving
    ratio of the two estimates is flagged outside [0.9, 1.1]; the ratio of
    their errors approaches 4 for second-order differences.

    Args:
        problem (SteeringProblem): the instance
        ctrl (Controller): iterate to check at
        risk (RiskAllocation, optional): risk shares, uniform when omitted
        step (float): coarse step h
        include_margins (bool): also check each constraint margin
        lifted (LiftedSystem, optional): precomputed lift

    Returns:
        GradientCheckReport: one entry per checked function
    """
    lifted = lifted or lift(problem.system)
    layout = DecisionLayout(problem.horizon, lifted.n, lifted.m)
    z = layout.pack(ctrl)
    report = GradientCheckReport(step=step)

    evaluation = objective_with_gradient(problem, ctrl, lifted)
    analytic = layout.pack_gradient(evaluation.dK, evaluation.dv)

    def _objective(x: np.ndarray) -> float:
        return objective(problem, layout.controller(x), lifted)

    coarse = central_difference(_objective, z, step)
    fine = central_difference(_objective, z, step / 2.0)
    report.entries.append(_compare("objective", analytic, coarse, fine))

    if include_margins:
        slots = boole_decompose(problem)
        risk = risk or uniform_allocation(problem, slots)
        margins = evaluate_margins(problem, lifted, ctrl, slots, risk, need_gradient=True)
        deltas = slot_deltas(slots, risk)
        for index, (slot, margin) in enumerate(zip(slots, margins)):
            analytic = layout.pack_gradient(margin.dK, margin.dv)

            def _margin(x: np.ndarray, hc=slot.constraint, delta=deltas[index]) -> float:
                return margin_with_gradient(hc, lifted, layout.controller(x), problem.x0_dists,
                                            problem.w_dists, delta, problem.quadrature,
                                            need_gradient=False).margin

            coarse = central_difference(_margin, z, step)
            fine = central_difference(_margin, z, step / 2.0)
            report.entries.append(_compare(slot.constraint.label, analytic, coarse, fine))
    logger.info(f"Gradient check: max relative error {report.max_relative_error():.3e}, "
                f"{len(report.flagged)} flagged")
    return report

