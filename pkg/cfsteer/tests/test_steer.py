"""Tests for the steering objective, its gradients and the decision layout."""
from dataclasses import replace

import numpy as np
import pytest

from cfsteer.shared_libraries.errors import DimensionMismatch
from cfsteer.shared_libraries.models import (
    Controller, LtvSystem, RiskAllocation, ScalarDist, SteeringProblem, TargetDensity, causal_mask
)
from cfsteer.tools import cf
from cfsteer.tools.lift import lift
from cfsteer.tools.steer import (
    DecisionLayout, build_solution, central_difference, cost_exact, cost_gradient, gradient_check,
    lq_initialization, objective, objective_with_gradient, stacked_weights, terminal_distances
)

WIDE_TARGET = TargetDensity(marginals=(ScalarDist.gaussian(1.2, 4.0), ScalarDist.gaussian(0.4, 4.0)))


def _random_problem(rng, horizon=3):
    n, m, p = 2, 1, 2
    system = LtvSystem(
        A=tuple(np.eye(n) + 0.2 * rng.standard_normal((n, n)) for _ in range(horizon)),
        B=tuple(rng.standard_normal((n, m)) for _ in range(horizon)),
        D=tuple(0.3 * rng.standard_normal((n, p)) for _ in range(horizon)),
    )
    families = [ScalarDist.gaussian, ScalarDist.laplace]

    def _component():
        family = families[int(rng.integers(0, 2))]
        return family(float(rng.normal()), float(rng.uniform(0.2, 1.0)))

    return SteeringProblem(
        system=system,
        x0_dists=tuple(_component() for _ in range(n)),
        w_dists=tuple(_component() for _ in range(horizon * p)),
        state_constraints=(),
        input_constraints=(),
        budget_x=0.1,
        budget_u=0.1,
        Q=tuple(np.diag(rng.uniform(0.5, 2.0, n)) for _ in range(horizon)),
        R=tuple(np.diag(rng.uniform(0.1, 1.0, m)) for _ in range(horizon)),
        reference=rng.normal(size=(horizon + 1) * n),
        target=TargetDensity(marginals=(ScalarDist.gaussian(0.0, 1.0), ScalarDist.gaussian(0.0, 1.0))),
        penalties=np.zeros(n),
        terminal_Q=np.eye(n),
    )


def _random_controller(rng, problem):
    N, (n, m, _) = problem.horizon, problem.dims
    K = 0.3 * rng.standard_normal((N * m, (N + 1) * n)) * causal_mask(N, n, m)
    return Controller(K=K, v=rng.normal(size=N * m), n=n, m=m)


def _rollout_costs(problem, ctrl, rng, samples):
    """Stage-by-stage simulation of the sampled cost, independent of the lifted matrices."""
    N, (n, m, p) = problem.horizon, problem.dims
    x0 = np.column_stack([cf.sample(d, rng, samples) for d in problem.x0_dists])
    w = np.column_stack([cf.sample(d, rng, samples) for d in problem.w_dists]).reshape(samples, N, p)
    reference = problem.reference.reshape(N + 1, n)
    open_loop = [x0]
    for k in range(N):
        open_loop.append(open_loop[k] @ problem.system.A[k].T + w[:, k] @ problem.system.D[k].T)
    xi = np.hstack(open_loop)
    x = x0
    costs = np.zeros(samples)
    for k in range(N):
        u = xi @ ctrl.K[k * m:(k + 1) * m].T + ctrl.v[k * m:(k + 1) * m]
        error = x - reference[k]
        costs += np.einsum('ij,jk,ik->i', error, problem.Q[k], error)
        costs += np.einsum('ij,jk,ik->i', u, problem.R[k], u)
        x = x @ problem.system.A[k].T + u @ problem.system.B[k].T + w[:, k] @ problem.system.D[k].T
    error = x - reference[N]
    costs += np.einsum('ij,jk,ik->i', error, problem.terminal_Q, error)
    return costs


def test_cost_exact_matches_sampled_cost(rng):
    """Test the closed-form expected cost on random instances against simulated rollouts."""
    for _ in range(20):
        problem = _random_problem(rng)
        ctrl = _random_controller(rng, problem)
        costs = _rollout_costs(problem, ctrl, rng, 200000)
        stderr = costs.std(ddof=1) / np.sqrt(costs.size)
        assert abs(cost_exact(problem, ctrl) - costs.mean()) <= 4 * stderr


def test_stacked_weights_terminal_block(scalar_problem):
    """Test the terminal state block is zero without a terminal weight."""
    Q_bar, R_bar = stacked_weights(scalar_problem)
    assert Q_bar.shape == (3, 3)
    assert Q_bar[-1, -1] == 0.0
    np.testing.assert_allclose(np.diag(R_bar), [0.1, 0.1])


def test_cost_gradient_matches_differences(rng):
    """Test dJ/dK and dJ/dv against central differences."""
    problem = _random_problem(rng)
    ctrl = _random_controller(rng, problem)
    layout = DecisionLayout(problem.horizon, 2, 1)
    _, dK, dv = cost_gradient(problem, ctrl)
    analytic = layout.pack_gradient(dK, dv)
    numeric = central_difference(lambda z: cost_exact(problem, layout.controller(z)), layout.pack(ctrl), 1e-5)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6)
    assert np.all(dK[~layout.mask] == 0.0)


def test_lq_initialization_is_stationary_in_v(rng):
    """Test that the LQ feed-forward zeroes the v-gradient at K = 0."""
    problem = _random_problem(rng)
    ctrl = lq_initialization(problem)
    assert np.all(ctrl.K == 0.0)
    _, _, dv = cost_gradient(problem, ctrl)
    np.testing.assert_allclose(dv, 0.0, atol=1e-9)
    shifted = Controller(K=ctrl.K, v=ctrl.v + 0.1, n=2, m=1)
    assert cost_exact(problem, shifted) > cost_exact(problem, ctrl)


def test_objective_gradient_matches_differences(planar_problem):
    """Test the gradient of J + sum lambda_i D_i."""
    # wide targets fix the frequency grid while the controller is perturbed
    planar_problem = replace(planar_problem, target=WIDE_TARGET)
    lifted = lift(planar_problem.system)
    layout = DecisionLayout(planar_problem.horizon, 2, 1)
    ctrl = Controller(K=0.2 * causal_mask(2, 2, 1), v=np.array([0.4, -0.1]), n=2, m=1)
    evaluation = objective_with_gradient(planar_problem, ctrl, lifted)
    analytic = layout.pack_gradient(evaluation.dK, evaluation.dv)
    numeric = central_difference(lambda z: objective(planar_problem, layout.controller(z), lifted),
                                 layout.pack(ctrl), 1e-6)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)
    assert evaluation.value == pytest.approx(
        evaluation.cost + 2.0 * evaluation.distances[0] + 1.0 * evaluation.distances[1])


def test_objective_skips_zero_weights(planar_problem):
    """Test that unweighted dimensions report no distance."""
    problem = replace(planar_problem, penalties=np.array([0.0, 1.0]))
    ctrl = Controller(K=np.zeros((2, 6)), v=np.zeros(2), n=2, m=1)
    evaluation = objective_with_gradient(problem, ctrl, need_gradient=False)
    assert evaluation.distances[0] is None
    assert evaluation.distances[1] > 0
    assert evaluation.dK is None


def test_gradient_check_reports_small_errors(planar_problem):
    """Test the step-halving gradient check on objective and margins."""
    planar_problem = replace(planar_problem, target=WIDE_TARGET)
    ctrl = Controller(K=0.2 * causal_mask(2, 2, 1), v=np.array([0.4, -0.1]), n=2, m=1)
    report = gradient_check(planar_problem, ctrl, step=1e-5)
    assert report.entries[0].name == "objective"
    assert len(report.entries) == 1 + 3
    assert report.entries[0].relative_error < 1e-4


def test_terminal_distances_and_solution(planar_problem):
    """Test the packaged solution sums the cost and the weighted distances."""
    ctrl = Controller(K=np.zeros((2, 6)), v=np.array([0.5, 0.5]), n=2, m=1)
    distances = terminal_distances(planar_problem, ctrl)
    risk = RiskAllocation(deltas_x=np.array([0.1]), deltas_u=np.array([0.05, 0.05]), budget_x=0.1, budget_u=0.1)
    solution = build_solution(planar_problem, ctrl, risk)
    assert solution.distances == pytest.approx(distances)
    assert solution.objective == pytest.approx(solution.cost + 2.0 * distances[0] + distances[1])


def test_decision_layout_round_trip():
    """Test pack and unpack of controllers and risk shares."""
    layout = DecisionLayout(2, 2, 1, state_slots=1, input_slots=2, with_risk=True)
    K = np.arange(12, dtype=float).reshape(2, 6) * causal_mask(2, 2, 1)
    ctrl = Controller(K=K, v=np.array([1.0, 2.0]), n=2, m=1)
    risk = RiskAllocation(deltas_x=np.array([0.05]), deltas_u=np.array([0.02, 0.03]), budget_x=0.1, budget_u=0.1)
    z = layout.pack(ctrl, risk)
    assert z.shape[0] == layout.size == layout.gain_size + 2 + 3
    np.testing.assert_array_equal(layout.controller(z).K, K)
    deltas_x, deltas_u = layout.deltas(z)
    np.testing.assert_array_equal(deltas_x, [0.05])
    np.testing.assert_array_equal(deltas_u, [0.02, 0.03])
    with pytest.raises(ValueError):
        layout.pack(ctrl)
    with pytest.raises(DimensionMismatch):
        layout.controller(z[:-1])
