"""Stacked horizon dynamics and the affine disturbance-feedback parameterization."""
import logging
from typing import Sequence, Tuple

import numpy as np
from scipy import linalg

from ..shared_libraries.errors import DimensionMismatch
from ..shared_libraries.models import (
    ConstraintKind, Controller, LiftedSystem, LinComboCF, LtvSystem, ScalarDist, causal_mask
)

logger = logging.getLogger(__name__)


def lift(sys: LtvSystem) -> LiftedSystem:
    """Concatenate the dynamics over the horizon.

    Block row k of A is A_{k-1}...A_0, block (k, j) of B is
    A_{k-1}...A_{j+1} B_j for j < k and zero otherwise; D likewise.

    Args:
        sys (LtvSystem): time-varying system

    Returns:
        LiftedSystem: stacked maps and selectors
    """
    if not isinstance(sys, LtvSystem):
        raise DimensionMismatch("lift expects an LtvSystem")
    N = sys.horizon
    n, m, p = sys.dims
    A_bar = np.zeros(((N + 1) * n, n))
    B_bar = np.zeros(((N + 1) * n, N * m))
    D_bar = np.zeros(((N + 1) * n, N * p))
    A_bar[:n] = np.eye(n)
    for k in range(1, N + 1):
        rows = slice(k * n, (k + 1) * n)
        prev = slice((k - 1) * n, k * n)
        A_k = sys.A[k - 1]
        A_bar[rows] = A_k @ A_bar[prev]
        B_bar[rows] = A_k @ B_bar[prev]
        D_bar[rows] = A_k @ D_bar[prev]
        B_bar[rows, (k - 1) * m:k * m] = sys.B[k - 1]
        D_bar[rows, (k - 1) * p:k * p] = sys.D[k - 1]
    logger.debug(f"Lifted system with N={N}, n={n}, m={m}, p={p}")
    return LiftedSystem(A=A_bar, B=B_bar, D=D_bar, horizon=N, n=n, m=m, p=p)


def _check(lifted: LiftedSystem, ctrl: Controller):
    if ctrl.n != lifted.n or ctrl.m != lifted.m or ctrl.horizon != lifted.horizon:
        raise DimensionMismatch(
            f"Controller (N={ctrl.horizon}, n={ctrl.n}, m={ctrl.m}) does not match "
            f"system (N={lifted.horizon}, n={lifted.n}, m={lifted.m})")


def closed_loop(lifted: LiftedSystem, ctrl: Controller) -> np.ndarray:
    """I + B K."""
    _check(lifted, ctrl)
    return np.eye(lifted.A.shape[0]) + lifted.B @ ctrl.K


def state_map(lifted: LiftedSystem, ctrl: Controller) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """X = M_x0 x0 + M_W W + m_const under the controller."""
    P = closed_loop(lifted, ctrl)
    return P @ lifted.A, P @ lifted.D, lifted.B @ ctrl.v


def input_map(lifted: LiftedSystem, ctrl: Controller) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """U = K A x0 + K D W + v."""
    _check(lifted, ctrl)
    return ctrl.K @ lifted.A, ctrl.K @ lifted.D, ctrl.v.copy()


def lincombo_of_row(row: np.ndarray, lifted: LiftedSystem, ctrl: Controller,
                    x0_dists: Sequence[ScalarDist], w_dists: Sequence[ScalarDist],
                    kind: ConstraintKind = ConstraintKind.STATE) -> LinComboCF:
    """Scalar functional row . X (state) or row . U (input) as a linear combination.

    The coefficients run over the x0 components followed by the stacked
    disturbance components; the deterministic part becomes the offset.
    """
    row = np.asarray(row, dtype=float).ravel()
    if kind == ConstraintKind.STATE:
        M_x0, M_W, const = state_map(lifted, ctrl)
    else:
        M_x0, M_W, const = input_map(lifted, ctrl)
    if row.shape[0] != M_x0.shape[0]:
        raise DimensionMismatch(f"Row of length {row.shape[0]} for a map with {M_x0.shape[0]} rows")
    if len(x0_dists) != lifted.n or len(w_dists) != lifted.horizon * lifted.p:
        raise DimensionMismatch("Distribution lists do not match the system dimensions")
    coefficients = np.concatenate([row @ M_x0, row @ M_W])
    return LinComboCF(coefficients=coefficients,
                      components=tuple(x0_dists) + tuple(w_dists),
                      offset=float(row @ const))


def row_chain_rule(row: np.ndarray, lifted: LiftedSystem, grad_coefficients: np.ndarray,
                   grad_offset: float, kind: ConstraintKind = ConstraintKind.STATE
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Pull sensitivities of a row functional back onto (K, v).

    Args:
        row: functional on X (state) or U (input)
        lifted: the lifted system
        grad_coefficients: derivative with respect to the linear-combination coefficients
        grad_offset: derivative with respect to the offset
        kind: which stacked vector the row reads

    Returns:
        Tuple[np.ndarray, np.ndarray]: (dK masked to the causal pattern, dv)
    """
    row = np.asarray(row, dtype=float).ravel()
    n = lifted.n
    g_x0, g_w = grad_coefficients[:n], grad_coefficients[n:]
    direction = lifted.A @ g_x0 + lifted.D @ g_w
    left = lifted.B.T @ row if kind == ConstraintKind.STATE else row
    dK = np.outer(left, direction)
    dK[~causal_mask(lifted.horizon, lifted.n, lifted.m)] = 0.0
    return dK, grad_offset * left


def lifted_moments(lifted: LiftedSystem, x0_dists: Sequence[ScalarDist],
                   w_dists: Sequence[ScalarDist]) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the open-loop stack A x0 + D W."""
    mu0 = np.array([d.mean() for d in x0_dists])
    muW = np.array([d.mean() for d in w_dists])
    var0 = np.array([d.variance() for d in x0_dists])
    varW = np.array([d.variance() for d in w_dists])
    mean = lifted.A @ mu0 + lifted.D @ muW
    cov = (lifted.A * var0) @ lifted.A.T + (lifted.D * varW) @ lifted.D.T
    return mean, cov


def controller_from_state_feedback(lifted: LiftedSystem, L: np.ndarray, g: np.ndarray) -> Controller:
    """Disturbance-feedback controller equivalent to U = L X + g.

    K = L (I - B L)^-1 and v = (I - L B)^-1 g; both inverses exist because
    B L is strictly lower block triangular.
    """
    L = np.asarray(L, dtype=float)
    mask = causal_mask(lifted.horizon, lifted.n, lifted.m)
    if L.shape != mask.shape:
        raise DimensionMismatch(f"L must be {mask.shape}, got {L.shape}")
    if np.any(np.abs(L[~mask]) > 1e-12):
        raise DimensionMismatch("L must be lower block triangular")
    L = np.where(mask, L, 0.0)
    I_x = np.eye(lifted.A.shape[0])
    I_u = np.eye(lifted.B.shape[1])
    K = linalg.solve((I_x - lifted.B @ L).T, L.T).T
    v = linalg.solve(I_u - L @ lifted.B, np.asarray(g, dtype=float).ravel())
    return Controller(K=K, v=v, n=lifted.n, m=lifted.m)


def state_feedback_from_controller(lifted: LiftedSystem, ctrl: Controller) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse map: L = K (I + B K)^-1 and g = (I + K B)^-1 v."""
    P = closed_loop(lifted, ctrl)
    L = linalg.solve(P.T, ctrl.K.T).T
    g = linalg.solve(np.eye(lifted.B.shape[1]) + ctrl.K @ lifted.B, ctrl.v)
    return L, g


def simulate_state_feedback(sys: LtvSystem, L: np.ndarray, g: np.ndarray,
                            x0: np.ndarray, W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Roll the dynamics forward one stage at a time under u_k = sum_{l<=k} L_kl x_l + g_k.

    Returns:
        Tuple[np.ndarray, np.ndarray]: stacked states X ((N+1) n) and inputs U (N m)
    """
    N = sys.horizon
    n, m, p = sys.dims
    X = np.zeros((N + 1) * n)
    U = np.zeros(N * m)
    X[:n] = x0
    for k in range(N):
        u = L[k * m:(k + 1) * m, :(k + 1) * n] @ X[:(k + 1) * n] + g[k * m:(k + 1) * m]
        U[k * m:(k + 1) * m] = u
        w = W[k * p:(k + 1) * p]
        X[(k + 1) * n:(k + 2) * n] = sys.A[k] @ X[k * n:(k + 1) * n] + sys.B[k] @ u + sys.D[k] @ w
    return X, U
