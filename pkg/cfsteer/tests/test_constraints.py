"""Tests for the Boole decomposition and chance-constraint margins."""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy import stats

from cfsteer.shared_libraries.models import ConstraintKind, Controller, HalfspaceConstraint, RiskAllocation
from cfsteer.tools.constraints import (
    boole_decompose, constraint_row, evaluate_margins, input_cc_margin, margin_with_gradient, slot_deltas,
    state_cc_margin, uniform_allocation
)
from cfsteer.tools.lift import lift, lincombo_of_row

from .conftest import FIXED_QUADRATURE


def test_boole_decompose_order_and_shares(scalar_problem):
    """Test state slots first, then inputs, each sharing its budget evenly."""
    slots = boole_decompose(scalar_problem)
    kinds = [s.constraint.kind for s in slots]
    assert kinds == [ConstraintKind.STATE] * 2 + [ConstraintKind.INPUT] * 4
    assert [s.slot for s in slots] == [0, 1, 0, 1, 2, 3]
    assert slots[0].uniform_share == pytest.approx(0.05)
    assert slots[2].uniform_share == pytest.approx(0.025)
    inputs = [(s.constraint.stage, s.constraint.row) for s in slots[2:]]
    assert inputs == sorted(inputs)


def test_uniform_allocation_fills_budgets(scalar_problem):
    """Test that the uniform shares sum to the budgets."""
    risk = uniform_allocation(scalar_problem, boole_decompose(scalar_problem))
    assert risk.total_x == pytest.approx(scalar_problem.budget_x)
    assert risk.total_u == pytest.approx(scalar_problem.budget_u)
    assert risk.within_budget()


def test_no_constraints(problem_factory):
    """Test an instance without hyperplanes."""
    problem = problem_factory(constrained=False)
    slots = boole_decompose(problem)
    assert slots == []
    risk = uniform_allocation(problem, slots)
    assert risk.deltas_x.size == 0 and risk.deltas_u.size == 0


def test_risk_allocation_validation():
    """Test risk share and budget validation."""
    with pytest.raises(ValueError):
        RiskAllocation(deltas_x=[-0.1], deltas_u=[], budget_x=0.1, budget_u=0.1)
    with pytest.raises(ValueError):
        RiskAllocation(deltas_x=[], deltas_u=[], budget_x=1.0, budget_u=0.1)
    over = RiskAllocation(deltas_x=[0.08, 0.05], deltas_u=[], budget_x=0.1, budget_u=0.1)
    assert not over.within_budget()


def test_state_margin_matches_gaussian_cdf(problem_factory):
    """Test the margin of x_1 <= 1.5 under K = 0 against the closed form."""
    problem = problem_factory(constrained=True)
    lifted = lift(problem.system)
    ctrl = Controller(K=np.zeros((2, 3)), v=np.array([0.4, 0.0]), n=1, m=1)
    hc = problem.state_constraints[0]
    # x_1 = x0 + u_0 + w_0 ~ N(0.4, 0.15)
    expected = stats.norm.cdf(1.5, loc=0.4, scale=np.sqrt(0.15)) - (1 - 0.05)
    margin = state_cc_margin(hc, lifted, ctrl, problem.x0_dists, problem.w_dists, 0.05, problem.quadrature)
    assert margin == pytest.approx(expected, abs=1e-6)
    with pytest.raises(ValueError):
        input_cc_margin(hc, lifted, ctrl, problem.x0_dists, problem.w_dists, 0.05, problem.quadrature)


def test_degenerate_input_margin_is_a_step(scalar_problem):
    """Test that a deterministic input is compared with its bound directly."""
    lifted = lift(scalar_problem.system)
    hc = HalfspaceConstraint(normal=[1.0], bound=1.0, stage=0, kind=ConstraintKind.INPUT)
    inside = Controller(K=np.zeros((2, 3)), v=np.array([0.5, 0.0]), n=1, m=1)
    outside = Controller(K=np.zeros((2, 3)), v=np.array([1.5, 0.0]), n=1, m=1)
    args = (scalar_problem.x0_dists, scalar_problem.w_dists, 0.1, scalar_problem.quadrature)
    ok = margin_with_gradient(hc, lifted, inside, *args)
    bad = margin_with_gradient(hc, lifted, outside, *args)
    assert ok.cdf == 1.0 and ok.margin == pytest.approx(0.1)
    assert bad.cdf == 0.0 and bad.margin == pytest.approx(-0.9 - 0.5)
    assert not ok.dK.any() and not ok.dv.any()


def test_violated_point_mass_margin_has_gradient(scalar_problem):
    """Test that a deterministic input past its bound still pulls the feed-forward back."""
    lifted = lift(scalar_problem.system)
    hc = HalfspaceConstraint(normal=[1.0], bound=1.0, stage=0, kind=ConstraintKind.INPUT)
    args = (scalar_problem.x0_dists, scalar_problem.w_dists, 0.1, scalar_problem.quadrature)

    def evaluate(v0):
        ctrl = Controller(K=np.zeros((2, 3)), v=np.array([v0, 0.0]), n=1, m=1)
        return margin_with_gradient(hc, lifted, ctrl, *args)

    bad = evaluate(2.0)
    np.testing.assert_allclose(bad.dv, [-1.0, 0.0])
    h = 1e-4
    numeric = (evaluate(2.0 + h).margin - evaluate(2.0 - h).margin) / (2 * h)
    assert bad.dv[0] == pytest.approx(numeric)
    assert evaluate(1.5).margin > bad.margin


def test_constraint_row_selects_stage(scalar_problem):
    """Test the functional each hyperplane bounds."""
    lifted = lift(scalar_problem.system)
    state_row = constraint_row(scalar_problem.state_constraints[1], lifted)
    np.testing.assert_array_equal(state_row, [0.0, 0.0, 1.0])
    input_row = constraint_row(scalar_problem.input_constraints[1], lifted)
    np.testing.assert_array_equal(input_row, [-1.0, 0.0])


def test_margin_gradient_matches_differences(planar_problem, rng):
    """Test analytic margin gradients against central differences."""
    problem = planar_problem
    lifted = lift(problem.system)
    K = 0.2 * rng.standard_normal((2, 6))
    ctrl = Controller(K=K, v=np.array([0.3, -0.2]), n=2, m=1)
    args = (problem.x0_dists, problem.w_dists, 0.05, FIXED_QUADRATURE)
    h = 1e-6
    for base in problem.state_constraints + problem.input_constraints:
        # put the bound near the mean so the margin is sensitive to the controller
        lc = lincombo_of_row(constraint_row(base, lifted), lifted, ctrl, problem.x0_dists, problem.w_dists,
                             base.kind)
        hc = HalfspaceConstraint(normal=base.normal, bound=lc.mean() + 0.3 * lc.std(), stage=base.stage,
                                 kind=base.kind)
        result = margin_with_gradient(hc, lifted, ctrl, *args)
        for i, j in zip(*np.nonzero(ctrl.K != 0)):
            step = np.zeros_like(ctrl.K)
            step[i, j] = h
            up = margin_with_gradient(hc, lifted, Controller(ctrl.K + step, ctrl.v, 2, 1), *args,
                                      need_gradient=False).margin
            down = margin_with_gradient(hc, lifted, Controller(ctrl.K - step, ctrl.v, 2, 1), *args,
                                        need_gradient=False).margin
            assert result.dK[i, j] == pytest.approx((up - down) / (2 * h), abs=1e-6)
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            up = margin_with_gradient(hc, lifted, Controller(ctrl.K, ctrl.v + step, 2, 1), *args,
                                      need_gradient=False).margin
            down = margin_with_gradient(hc, lifted, Controller(ctrl.K, ctrl.v - step, 2, 1), *args,
                                        need_gradient=False).margin
            assert result.dv[i] == pytest.approx((up - down) / (2 * h), abs=1e-6)


def test_evaluate_margins_parallel_matches_serial(planar_problem, rng):
    """Test that fanning out over threads does not change the margins."""
    lifted = lift(planar_problem.system)
    ctrl = Controller(K=0.1 * rng.standard_normal((2, 6)), v=np.array([0.1, 0.2]), n=2, m=1)
    slots = boole_decompose(planar_problem)
    risk = uniform_allocation(planar_problem, slots)
    serial = evaluate_margins(planar_problem, lifted, ctrl, slots, risk, need_gradient=True)
    with ThreadPoolExecutor(max_workers=3) as executor:
        parallel = evaluate_margins(planar_problem, lifted, ctrl, slots, risk, need_gradient=True,
                                    executor=executor)
    assert [e.margin for e in serial] == [e.margin for e in parallel]
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.dK, b.dK)
    np.testing.assert_allclose(slot_deltas(slots, risk), [0.1, 0.05, 0.05])


def test_margin_monotone_in_bound(planar_problem):
    """Test that loosening a hyperplane never decreases its margin."""
    lifted = lift(planar_problem.system)
    ctrl = Controller(K=0.1 * np.ones((2, 6)), v=np.array([0.5, 0.2]), n=2, m=1)
    margins = []
    for bound in np.linspace(-1.0, 4.0, 26):
        hc = HalfspaceConstraint(normal=[1.0, 1.0], bound=bound, stage=2, kind=ConstraintKind.STATE)
        margins.append(margin_with_gradient(hc, lifted, ctrl, planar_problem.x0_dists, planar_problem.w_dists,
                                            0.05, planar_problem.quadrature, need_gradient=False).margin)
    assert np.all(np.diff(margins) >= -1e-8)


def test_feedforward_shift_moves_offset_only(planar_problem):
    """Test that shifting v changes the offset by row . B c and leaves the coefficients alone."""
    lifted = lift(planar_problem.system)
    K = 0.1 * np.ones((2, 6))
    shift = np.array([0.3, -0.7])
    hc = planar_problem.state_constraints[0]
    row = constraint_row(hc, lifted)
    base = lincombo_of_row(row, lifted, Controller(K, np.zeros(2), 2, 1), planar_problem.x0_dists,
                           planar_problem.w_dists)
    moved = lincombo_of_row(row, lifted, Controller(K, shift, 2, 1), planar_problem.x0_dists,
                            planar_problem.w_dists)
    np.testing.assert_array_equal(base.coefficients, moved.coefficients)
    assert moved.offset - base.offset == pytest.approx(row @ lifted.B @ shift)
