"""Augmented Lagrangian driver for the chance-constrained steering problem.

Inequalities c(z) >= 0 are handled with the bound-constrained augmented
Lagrangian

    psi(c, lam, rho) = -lam c + rho/2 c^2    if c - lam/rho <= 0
                     = -lam^2 / (2 rho)      otherwise

and each subproblem is minimized by L-BFGS-B with the risk shares kept in
[delta_min, budget] through variable bounds. The multipliers and the merit
see c(z) - backoff (ten feasibility tolerances), so the accepted iterate
sits on the feasible side of every constraint.
"""
import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import optimize

from ..shared_libraries.constants import SOLVER_DEFAULTS
from ..shared_libraries.errors import DegenerateDistribution, Infeasible, MaxIterations, NumericalBreakdown
from ..shared_libraries.models import (
    ConstraintKind, Controller, LiftedSystem, RiskAllocation, Solution, SolverDiagnostics, SteeringProblem
)
from .constraints import ConstraintSlot, boole_decompose, evaluate_margins, uniform_allocation
from .lift import lift
from .progress import format_iteration
from .steer import DecisionLayout, build_solution, central_difference, lq_initialization, objective_with_gradient

logger = logging.getLogger(__name__)


@dataclass
class Evaluation:
    objective: float
    cost: float
    constraints: np.ndarray
    gradient: Optional[np.ndarray] = None
    jacobian: Optional[np.ndarray] = None


class _Breakdown(Exception):
    pass


class SteeringSolver:
    """One solve of one problem instance.

    Evaluations are pure in the decision vector, so constraint and distance
    terms may fan out over a thread pool.
    """

    def __init__(self, problem: SteeringProblem, executor: Optional[Executor] = None):
        self.problem = problem
        self.options = problem.solver
        self.lifted: LiftedSystem = lift(problem.system)
        self.slots: List[ConstraintSlot] = boole_decompose(problem)
        self.executor = executor
        state_slots = sum(1 for s in self.slots if s.constraint.kind == ConstraintKind.STATE)
        input_slots = len(self.slots) - state_slots
        self.layout = DecisionLayout(problem.horizon, self.lifted.n, self.lifted.m,
                                     state_slots, input_slots, with_risk=not self.options.fixed_risk)
        self.uniform = uniform_allocation(problem, self.slots)
        self.evaluations = 0

    # -- problem functions -------------------------------------------------

    def bounds(self) -> List[Tuple[Optional[float], Optional[float]]]:
        bounds: List[Tuple[Optional[float], Optional[float]]] = [(None, None)] * self.layout.control_size
        if self.layout.with_risk:
            for count, budget in ((self.layout.state_slots, self.problem.budget_x),
                                  (self.layout.input_slots, self.problem.budget_u)):
                bounds += [(min(self.options.delta_min, budget), budget)] * count
        return bounds

    def initial_point(self, initial: Optional[Controller] = None) -> np.ndarray:
        ctrl = initial or lq_initialization(self.problem, self.lifted)
        risk = self.uniform if self.layout.with_risk else None
        z = self.layout.pack(ctrl, risk)
        lower = np.array([-np.inf if lo is None else lo for lo, _ in self.bounds()])
        upper = np.array([np.inf if hi is None else hi for _, hi in self.bounds()])
        return np.clip(z, lower, upper)

    def risk_at(self, z: np.ndarray) -> RiskAllocation:
        if not self.layout.with_risk:
            return self.uniform
        deltas_x, deltas_u = self.layout.deltas(z)
        return RiskAllocation(deltas_x=np.maximum(deltas_x, 0.0), deltas_u=np.maximum(deltas_u, 0.0),
                              budget_x=self.problem.budget_x, budget_u=self.problem.budget_u)

    def budget_rows(self) -> List[Tuple[float, np.ndarray]]:
        """Budget constraints Delta - sum(delta) >= 0 for kinds that have hyperplanes."""
        rows = []
        if not self.layout.with_risk:
            return rows
        start = self.layout.control_size
        for count, budget, offset in ((self.layout.state_slots, self.problem.budget_x, 0),
                                      (self.layout.input_slots, self.problem.budget_u,
                                       self.layout.state_slots)):
            if count == 0:
                continue
            row = np.zeros(self.layout.size)
            row[start + offset:start + offset + count] = -1.0
            rows.append((budget, row))
        return rows

    def evaluate(self, z: np.ndarray, need_gradient: bool = True) -> Evaluation:
        """Objective and constraints (margins, then budgets) at z."""
        self.evaluations += 1
        ctrl = self.layout.controller(z)
        risk = self.risk_at(z)
        try:
            obj = objective_with_gradient(self.problem, ctrl, self.lifted, need_gradient, self.executor)
        except DegenerateDistribution as e:
            raise _Breakdown(f"Weighted terminal marginal is degenerate at {e.value:.6g}") from e
        margins = evaluate_margins(self.problem, self.lifted, ctrl, self.slots, risk,
                                   need_gradient, self.executor)
        budgets = self.budget_rows()
        values = [e.margin for e in margins] + [budget + row @ z for budget, row in budgets]
        result = Evaluation(objective=obj.value, cost=obj.cost, constraints=np.array(values))
        if need_gradient:
            result.gradient = self.layout.pack_gradient(obj.dK, obj.dv)
            jacobian = np.zeros((len(values), self.layout.size))
            for index, (slot, margin) in enumerate(zip(self.slots, margins)):
                jacobian[index] = self.layout.pack_gradient(margin.dK, margin.dv)
                if self.layout.with_risk:
                    offset = 0 if slot.constraint.kind == ConstraintKind.STATE else self.layout.state_slots
                    jacobian[index, self.layout.control_size + offset + slot.slot] = 1.0
            for index, (_, row) in enumerate(budgets):
                jacobian[len(margins) + index] = row
            result.jacobian = jacobian
        if not (np.isfinite(result.objective) and np.all(np.isfinite(result.constraints))):
            raise _Breakdown("Non-finite objective or constraint value")
        return result

    # -- augmented Lagrangian --------------------------------------------

    @staticmethod
    def penalty_terms(c: np.ndarray, lam: np.ndarray, rho: float) -> Tuple[float, np.ndarray]:
        """Sum of psi over the constraints and d psi / d c."""
        active = c - lam / rho <= 0.0
        psi = np.where(active, -lam * c + 0.5 * rho * c * c, -lam * lam / (2.0 * rho))
        d_psi = np.where(active, -lam + rho * c, 0.0)
        return float(psi.sum()), d_psi

    def merit(self, z: np.ndarray, lam: np.ndarray, rho: float,
              backoff: float = 0.0) -> Tuple[float, np.ndarray]:
        """Augmented Lagrangian of c(z) - backoff >= 0 and its gradient."""
        if self.options.gradient == 'finite_difference':
            def _value(x: np.ndarray) -> float:
                e = self.evaluate(x, need_gradient=False)
                return e.objective + self.penalty_terms(e.constraints - backoff, lam, rho)[0]
            return _value(z), central_difference(_value, z, self.options.fd_step)
        e = self.evaluate(z)
        psi, d_psi = self.penalty_terms(e.constraints - backoff, lam, rho)
        gradient = e.gradient + e.jacobian.T @ d_psi
        if not np.all(np.isfinite(gradient)):
            raise _Breakdown("Non-finite gradient")
        return e.objective + psi, gradient

    def inner_solve(self, z: np.ndarray, lam: np.ndarray, rho: float, backoff: float,
                    bounds: List[Tuple[Optional[float], Optional[float]]]) -> optimize.OptimizeResult:
        """Minimize the merit with L-BFGS-B, retrying once with a longer line search
        when the first attempt stops without taking a step.
        """
        options = {'maxiter': self.options.max_inner_iterations,
                   'gtol': self.options.stationarity_tolerance,
                   'ftol': self.options.stall_tolerance}
        result = optimize.minimize(self.merit, z, args=(lam, rho, backoff), jac=True, method='L-BFGS-B',
                                   bounds=bounds, options=options)
        if result.nit == 0 and not result.success:
            logger.debug(f"L-BFGS-B took no step ({result.message}); retrying")
            options = dict(options, maxls=SOLVER_DEFAULTS['restart_line_search'])
            result = optimize.minimize(self.merit, z, args=(lam, rho, backoff), jac=True, method='L-BFGS-B',
                                       bounds=bounds, options=options)
        return result

    def stationarity(self, z: np.ndarray, e: Evaluation, lam: np.ndarray) -> float:
        """Infinity norm of the bound-projected Lagrangian gradient."""
        gradient = e.gradient - e.jacobian.T @ lam
        lower = np.array([-np.inf if lo is None else lo for lo, _ in self.bounds()])
        upper = np.array([np.inf if hi is None else hi for _, hi in self.bounds()])
        return float(np.max(np.abs(np.clip(z - gradient, lower, upper) - z), initial=0.0))

    def solve(self, initial: Optional[Controller] = None) -> Solution:
        """Run the outer loop.

        Raises:
            Infeasible: no iterate reached the feasibility tolerance
            MaxIterations: feasible but not stationary when the budget ran out
            NumericalBreakdown: a non-finite value appeared
        """
        opts = self.options
        diagnostics = SolverDiagnostics(status="running")
        z = self.initial_point(initial)
        bounds = self.bounds()
        n_constraints = len(self.slots) + len(self.budget_rows())
        lam = np.zeros(n_constraints)
        rho = opts.initial_penalty
        backoff = SOLVER_DEFAULTS['feasibility_backoff'] * opts.feasibility_tolerance
        best: Optional[Tuple[bool, float, np.ndarray]] = None
        previous_violation = np.inf
        previous_objective = None
        stalled_at_max = 0
        logger.info(f"Solving: {self.layout.size} variables, {n_constraints} constraints, "
                    f"risk {'fixed' if opts.fixed_risk else 'optimized'}, {opts.gradient} gradients")

        try:
            for iteration in range(1, opts.max_outer_iterations + 1):
                before, _ = self.merit(z, lam, rho, backoff)
                result = self.inner_solve(z, lam, rho, backoff, bounds)
                aborted = result.nit == 0 and not result.success
                z = result.x
                diagnostics.merit_history.append((float(before), float(result.fun)))
                diagnostics.inner_iterations += int(result.nit)

                e = self.evaluate(z)
                violation = float(max(0.0, -np.min(e.constraints, initial=0.0)))
                lam = np.maximum(lam - rho * (e.constraints - backoff), 0.0)
                stationarity = self.stationarity(z, e, lam)
                diagnostics.iterations = iteration
                diagnostics.max_violation = violation
                diagnostics.stationarity = stationarity
                diagnostics.penalty = rho
                diagnostics.objective_history.append(e.objective)
                logger.info(format_iteration(iteration, e.objective, e.cost, violation, stationarity, rho))

                feasible = violation <= opts.feasibility_tolerance
                key = (not feasible, e.objective if feasible else violation)
                if best is None or key < (not best[0], best[1]):
                    best = (feasible, key[1], z.copy())

                stalled = previous_objective is not None and (
                    abs(e.objective - previous_objective) <= opts.stall_tolerance * (1.0 + abs(e.objective))
                    or result.nit == 0)
                if feasible and (stationarity <= opts.stationarity_tolerance or stalled):
                    diagnostics.converged = True
                    diagnostics.status = "converged"
                    break

                if (rho >= opts.max_penalty or aborted) and violation >= 0.99 * previous_violation:
                    stalled_at_max += 1
                    if stalled_at_max >= SOLVER_DEFAULTS['stall_iterations']:
                        logger.warning(f"No feasibility progress at penalty {rho:g}")
                        break
                else:
                    stalled_at_max = 0
                if violation > 0.25 * previous_violation and not aborted:
                    rho = min(rho * opts.penalty_growth, opts.max_penalty)
                previous_violation = violation
                previous_objective = e.objective
        except _Breakdown as err:
            diagnostics.status = "numerical_breakdown"
            diagnostics.function_evaluations = self.evaluations
            raise NumericalBreakdown(str(err), self._best_solution(best, diagnostics)) from err

        diagnostics.function_evaluations = self.evaluations
        if diagnostics.converged:
            solution = build_solution(self.problem, self.layout.controller(z), self.risk_at(z),
                                      diagnostics, self.lifted)
            logger.info(f"Converged after {diagnostics.iterations} outer iterations: "
                        f"objective {solution.objective:.6f}, J {solution.cost:.6f}")
            return solution

        solution = self._best_solution(best, diagnostics)
        if best is None or not best[0]:
            diagnostics.status = "infeasible"
            raise Infeasible(f"No feasible iterate after {diagnostics.iterations} outer iterations "
                             f"(best violation {best[1] if best else float('nan'):.3e})", solution)
        diagnostics.status = "max_iterations"
        raise MaxIterations(f"Stopped after {diagnostics.iterations} outer iterations "
                            f"(stationarity {diagnostics.stationarity:.3e})", solution)

    def _best_solution(self, best, diagnostics: SolverDiagnostics) -> Optional[Solution]:
        if best is None:
            return None
        z = best[2]
        try:
            return build_solution(self.problem, self.layout.controller(z), self.risk_at(z),
                                  diagnostics, self.lifted)
        except (ValueError, DegenerateDistribution):
            logger.exception("Could not package the best iterate")
            return None


def solve(problem: SteeringProblem, initial: Optional[Controller] = None,
          workers: Optional[int] = None) -> Solution:
    """Solve a steering problem from the LQ initialization (or `initial`).

    Args:
        problem (SteeringProblem): the instance
        initial (Controller, optional): starting controller
        workers (int, optional): thread fan-out, defaults to problem.solver.workers

    Returns:
        Solution: the converged solution
    """
    workers = workers or problem.solver.workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return SteeringSolver(problem, executor).solve(initial)
    return SteeringSolver(problem).solve(initial)
