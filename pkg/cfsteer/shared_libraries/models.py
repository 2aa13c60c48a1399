"""Domain data models shared by the cfsteer tools."""
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constants import DEGENERATE_STD, QUADRATURE_DEFAULTS, SOLVER_DEFAULTS, MC_DEFAULTS, GRADIENT_MODES
from .errors import DimensionMismatch


class DistFamily(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    MIXTURE = "mixture"


@dataclass(frozen=True)
class ScalarDist:
    """A univariate distribution from the closed catalog.

    Gaussian and Laplace use `loc` with `spread` (variance for Gaussian,
    scale for Laplace); mixtures use the `weights`/`means`/`variances`
    tuples of their Gaussian components.
    """
    family: DistFamily
    loc: float = 0.0
    spread: float = 0.0
    weights: Tuple[float, ...] = ()
    means: Tuple[float, ...] = ()
    variances: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.family == DistFamily.GAUSSIAN:
            if not np.isfinite(self.loc) or not np.isfinite(self.spread) or self.spread < 0:
                raise ValueError(f"Gaussian needs finite mean and variance >= 0, got {self.loc}, {self.spread}")
        elif self.family == DistFamily.LAPLACE:
            if not np.isfinite(self.loc) or not np.isfinite(self.spread) or self.spread <= 0:
                raise ValueError(f"Laplace needs finite location and scale > 0, got {self.loc}, {self.spread}")
        elif self.family == DistFamily.MIXTURE:
            k = len(self.weights)
            if k == 0 or len(self.means) != k or len(self.variances) != k:
                raise ValueError("Mixture needs equally long, non-empty weights, means and variances")
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"Mixture weights must lie on the probability simplex, got {self.weights}")
            if np.any(np.asarray(self.variances, dtype=float) < 0):
                raise ValueError("Mixture variances must be >= 0")
        else:
            raise ValueError(f"Unknown distribution family: {self.family}")

    @classmethod
    def gaussian(cls, mean: float, variance: float) -> "ScalarDist":
        return cls(DistFamily.GAUSSIAN, loc=float(mean), spread=float(variance))

    @classmethod
    def laplace(cls, location: float, scale: float) -> "ScalarDist":
        return cls(DistFamily.LAPLACE, loc=float(location), spread=float(scale))

    @classmethod
    def mixture(cls, weights: Sequence[float], means: Sequence[float],
                variances: Sequence[float]) -> "ScalarDist":
        return cls(DistFamily.MIXTURE,
                   weights=tuple(float(w) for w in weights),
                   means=tuple(float(m) for m in means),
                   variances=tuple(float(v) for v in variances))

    def mean(self) -> float:
        if self.family == DistFamily.MIXTURE:
            return float(np.dot(self.weights, self.means))
        return self.loc

    def variance(self) -> float:
        if self.family == DistFamily.GAUSSIAN:
            return self.spread
        if self.family == DistFamily.LAPLACE:
            return 2.0 * self.spread ** 2
        w = np.asarray(self.weights)
        mu = np.asarray(self.means)
        second = np.dot(w, np.asarray(self.variances) + mu ** 2)
        return float(max(second - np.dot(w, mu) ** 2, 0.0))


@dataclass(frozen=True, eq=False)
class LinComboCF:
    """y = coefficients . z + offset for independent scalar components z."""
    coefficients: np.ndarray
    components: Tuple[ScalarDist, ...]
    offset: float = 0.0

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=float).ravel()
        if coefficients.shape[0] != len(self.components):
            raise DimensionMismatch(
                f"{coefficients.shape[0]} coefficients for {len(self.components)} components")
        object.__setattr__(self, 'coefficients', coefficients)
        object.__setattr__(self, 'components', tuple(self.components))
        object.__setattr__(self, 'offset', float(self.offset))

    def mean(self) -> float:
        return self.offset + float(sum(c * d.mean() for c, d in zip(self.coefficients, self.components)))

    def variance(self) -> float:
        return float(sum(c * c * d.variance() for c, d in zip(self.coefficients, self.components)))

    def std(self) -> float:
        return float(np.sqrt(self.variance()))

    def is_degenerate(self) -> bool:
        return self.std() < DEGENERATE_STD


class TruncationMode(str, Enum):
    FIXED_UPPER = "fixed"
    AUTO = "auto"


@dataclass(frozen=True)
class QuadratureSpec:
    """Trapezoidal quadrature settings.

    Frequencies are standardized (t times the standard deviation of the
    variable being inverted), so `upper` and `nodes_per_unit` are scale free.
    """
    truncation: TruncationMode = TruncationMode.AUTO
    upper: Optional[float] = None
    multiplier: float = QUADRATURE_DEFAULTS['multiplier']
    nodes_per_unit: int = QUADRATURE_DEFAULTS['nodes_per_unit']
    absolute_tolerance: float = QUADRATURE_DEFAULTS['absolute_tolerance']
    max_upper: float = QUADRATURE_DEFAULTS['max_upper']
    max_nodes: int = QUADRATURE_DEFAULTS['max_nodes']

    def __post_init__(self):
        if self.truncation == TruncationMode.FIXED_UPPER and (self.upper is None or self.upper <= 0):
            raise ValueError("FixedUpper truncation needs upper > 0")
        if self.multiplier <= 0:
            raise ValueError("multiplier must be > 0")
        if self.nodes_per_unit < QUADRATURE_DEFAULTS['min_nodes_per_unit']:
            raise ValueError(f"nodes_per_unit must be >= {QUADRATURE_DEFAULTS['min_nodes_per_unit']}")
        if self.absolute_tolerance <= 0:
            raise ValueError("absolute_tolerance must be > 0")

    @classmethod
    def fixed(cls, upper: float, **kwargs) -> "QuadratureSpec":
        return cls(truncation=TruncationMode.FIXED_UPPER, upper=upper, **kwargs)


@dataclass(frozen=True, eq=False)
class LtvSystem:
    """x_{k+1} = A_k x_k + B_k u_k + D_k w_k for k = 0..N-1."""
    A: Tuple[np.ndarray, ...]
    B: Tuple[np.ndarray, ...]
    D: Tuple[np.ndarray, ...]

    def __post_init__(self):
        A = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in self.A)
        B = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.B)
        D = tuple(np.atleast_2d(np.asarray(d, dtype=float)) for d in self.D)
        if not A or len(A) != len(B) or len(A) != len(D):
            raise DimensionMismatch(f"Need one (A, B, D) triple per stage, got {len(A)}, {len(B)}, {len(D)}")
        n, m, p = A[0].shape[0], B[0].shape[1], D[0].shape[1]
        for k, (a, b, d) in enumerate(zip(A, B, D)):
            if a.shape != (n, n) or b.shape != (n, m) or d.shape != (n, p):
                raise DimensionMismatch(
                    f"Stage {k}: expected A {n}x{n}, B {n}x{m}, D {n}x{p}; "
                    f"got {a.shape}, {b.shape}, {d.shape}")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(d))):
                raise ValueError(f"Stage {k} matrices must be finite")
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)
        object.__setattr__(self, 'D', D)

    @classmethod
    def time_invariant(cls, A, B, D, horizon: int) -> "LtvSystem":
        if horizon < 1:
            raise DimensionMismatch("horizon must be a positive integer")
        return cls(A=(A,) * horizon, B=(B,) * horizon, D=(D,) * horizon)

    @property
    def horizon(self) -> int:
        return len(self.A)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.A[0].shape[0], self.B[0].shape[1], self.D[0].shape[1]


@dataclass(frozen=True, eq=False)
class LiftedSystem:
    """Stacked horizon maps X = A x0 + B U + D W over stages 0..N."""
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    horizon: int
    n: int
    m: int
    p: int

    @cached_property
    def E(self) -> Tuple[np.ndarray, ...]:
        """State selectors, E[k] @ X == x_k for k = 0..N."""
        eye = np.eye((self.horizon + 1) * self.n)
        return tuple(eye[k * self.n:(k + 1) * self.n] for k in range(self.horizon + 1))

    @cached_property
    def F(self) -> Tuple[np.ndarray, ...]:
        """Input selectors, F[k] @ U == u_k for k = 0..N-1."""
        eye = np.eye(self.horizon * self.m)
        return tuple(eye[k * self.m:(k + 1) * self.m] for k in range(self.horizon))


def causal_mask(horizon: int, n: int, m: int) -> np.ndarray:
    """Boolean mask of the admissible entries of an (N m) x ((N+1) n) gain.

    Block row k may only read block columns 0..k.
    """
    mask = np.zeros((horizon * m, (horizon + 1) * n), dtype=bool)
    for k in range(horizon):
        mask[k * m:(k + 1) * m, :(k + 1) * n] = True
    return mask


@dataclass(frozen=True, eq=False)
class Controller:
    """Affine disturbance feedback U = K (A x0 + D W) + v.

    Entries of K outside the causal pattern are pinned to zero.
    """
    K: np.ndarray
    v: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).ravel()
        if v.shape[0] % self.m != 0:
            raise DimensionMismatch(f"v has length {v.shape[0]}, not a multiple of m={self.m}")
        horizon = v.shape[0] // self.m
        K = np.array(self.K, dtype=float)
        if K.shape != (horizon * self.m, (horizon + 1) * self.n):
            raise DimensionMismatch(
                f"K must be {horizon * self.m}x{(horizon + 1) * self.n}, got {K.shape}")
        K[~causal_mask(horizon, self.n, self.m)] = 0.0
        object.__setattr__(self, 'K', K)
        object.__setattr__(self, 'v', v)

    @property
    def horizon(self) -> int:
        return self.v.shape[0] // self.m

    @classmethod
    def zeros(cls, horizon: int, n: int, m: int) -> "Controller":
        return cls(K=np.zeros((horizon * m, (horizon + 1) * n)), v=np.zeros(horizon * m), n=n, m=m)


class ConstraintKind(str, Enum):
    STATE = "state"
    INPUT = "input"


@dataclass(frozen=True, eq=False)
class HalfspaceConstraint:
    """normal . x_k <= bound (state) or normal . u_k <= bound (input)."""
    normal: np.ndarray
    bound: float
    stage: int
    kind: ConstraintKind
    row: int = 0    # index j of the hyperplane within its polytope

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float).ravel()
        if normal.size == 0 or not np.any(normal != 0):
            raise ValueError("Constraint normal must be nonzero")
        object.__setattr__(self, 'normal', normal)
        object.__setattr__(self, 'bound', float(self.bound))

    @property
    def label(self) -> str:
        return f"{self.kind.value}[j={self.row},k={self.stage}]"


@dataclass(frozen=True, eq=False)
class RiskAllocation:
    deltas_x: np.ndarray
    deltas_u: np.ndarray
    budget_x: float
    budget_u: float

    def __post_init__(self):
        for budget in (self.budget_x, self.budget_u):
            if not 0.0 <= budget < 1.0:
                raise ValueError(f"Risk budgets must lie in [0, 1), got {budget}")
        object.__setattr__(self, 'deltas_x', np.asarray(self.deltas_x, dtype=float).ravel())
        object.__setattr__(self, 'deltas_u', np.asarray(self.deltas_u, dtype=float).ravel())
        if np.any(self.deltas_x < 0) or np.any(self.deltas_u < 0):
            raise ValueError("Risk shares must be nonnegative")

    @property
    def total_x(self) -> float:
        return float(self.deltas_x.sum())

    @property
    def total_u(self) -> float:
        return float(self.deltas_u.sum())

    def within_budget(self, tolerance: float = 1e-9) -> bool:
        return self.total_x <= self.budget_x + tolerance and self.total_u <= self.budget_u + tolerance


@dataclass(frozen=True)
class TargetDensity:
    """Independent terminal marginals, one per state dimension."""
    marginals: Tuple[ScalarDist, ...]

    @property
    def dim(self) -> int:
        return len(self.marginals)


@dataclass
class MatchReport:
    distances: List[float]
    sup_deviations: List[float]
    joint_bound: float
    thresholds: Optional[List[float]] = None
    joint_direct: Optional[float] = None       # two-dimensional states only
    joint_guaranteed: Optional[bool] = None

    def bound_holds(self, tolerance: float = 1e-6) -> List[bool]:
        return [s <= d + tolerance for s, d in zip(self.sup_deviations, self.distances)]

    @property
    def joint_failed(self) -> bool:
        """The direct joint distance exceeds the summed bound."""
        return self.joint_direct is not None and self.joint_direct > self.joint_bound + 1e-6


@dataclass(frozen=True)
class SolverOptions:
    max_outer_iterations: int = SOLVER_DEFAULTS['max_outer_iterations']
    max_inner_iterations: int = SOLVER_DEFAULTS['max_inner_iterations']
    feasibility_tolerance: float = SOLVER_DEFAULTS['feasibility_tolerance']
    stationarity_tolerance: float = SOLVER_DEFAULTS['stationarity_tolerance']
    initial_penalty: float = SOLVER_DEFAULTS['initial_penalty']
    penalty_growth: float = SOLVER_DEFAULTS['penalty_growth']
    max_penalty: float = SOLVER_DEFAULTS['max_penalty']
    delta_min: float = SOLVER_DEFAULTS['delta_min']
    stall_tolerance: float = SOLVER_DEFAULTS['stall_tolerance']
    fixed_risk: bool = False
    gradient: str = SOLVER_DEFAULTS['gradient']
    fd_step: float = SOLVER_DEFAULTS['fd_step']
    workers: int = 1

    def __post_init__(self):
        if self.gradient not in GRADIENT_MODES:
            raise ValueError(f"gradient must be one of {GRADIENT_MODES}")


@dataclass(frozen=True, eq=False)
class SteeringProblem:
    """A complete distribution steering instance."""
    system: LtvSystem
    x0_dists: Tuple[ScalarDist, ...]
    w_dists: Tuple[ScalarDist, ...]
    state_constraints: Tuple[HalfspaceConstraint, ...]
    input_constraints: Tuple[HalfspaceConstraint, ...]
    budget_x: float
    budget_u: float
    Q: Tuple[np.ndarray, ...]
    R: Tuple[np.ndarray, ...]
    reference: np.ndarray
    target: TargetDensity
    penalties: np.ndarray
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    solver: SolverOptions = field(default_factory=SolverOptions)
    terminal_Q: Optional[np.ndarray] = None

    def __post_init__(self):
        N = self.system.horizon
        n, m, p = self.system.dims
        object.__setattr__(self, 'x0_dists', tuple(self.x0_dists))
        object.__setattr__(self, 'w_dists', tuple(self.w_dists))
        object.__setattr__(self, 'state_constraints', tuple(self.state_constraints))
        object.__setattr__(self, 'input_constraints', tuple(self.input_constraints))
        object.__setattr__(self, 'Q', tuple(np.atleast_2d(np.asarray(q, dtype=float)) for q in self.Q))
        object.__setattr__(self, 'R', tuple(np.atleast_2d(np.asarray(r, dtype=float)) for r in self.R))
        object.__setattr__(self, 'reference', np.asarray(self.reference, dtype=float).ravel())
        object.__setattr__(self, 'penalties', np.asarray(self.penalties, dtype=float).ravel())
        if len(self.x0_dists) != n:
            raise DimensionMismatch(f"Need {n} initial-state components, got {len(self.x0_dists)}")
        if len(self.w_dists) != N * p:
            raise DimensionMismatch(f"Need {N * p} disturbance components, got {len(self.w_dists)}")
        if len(self.Q) != N or any(q.shape != (n, n) for q in self.Q):
            raise DimensionMismatch(f"Need {N} stage weights Q_k of shape {n}x{n}")
        if len(self.R) != N or any(r.shape != (m, m) for r in self.R):
            raise DimensionMismatch(f"Need {N} stage weights R_k of shape {m}x{m}")
        if self.reference.shape[0] != (N + 1) * n:
            raise DimensionMismatch(f"Reference must have length {(N + 1) * n}")
        if self.target.dim != n:
            raise DimensionMismatch(f"Target needs {n} marginals, got {self.target.dim}")
        if self.penalties.shape[0] != n:
            raise DimensionMismatch(f"Need {n} penalty weights, got {self.penalties.shape[0]}")
        for hc in self.state_constraints:
            if hc.normal.shape[0] != n or not 1 <= hc.stage <= N:
                raise DimensionMismatch(f"Bad state constraint {hc.label}")
        for hc in self.input_constraints:
            if hc.normal.shape[0] != m or not 0 <= hc.stage <= N - 1:
                raise DimensionMismatch(f"Bad input constraint {hc.label}")
        if self.terminal_Q is not None:
            object.__setattr__(self, 'terminal_Q', np.atleast_2d(np.asarray(self.terminal_Q, dtype=float)))
            if self.terminal_Q.shape != (n, n):
                raise DimensionMismatch(f"terminal_Q must be {n}x{n}")

    @property
    def horizon(self) -> int:
        return self.system.horizon

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.system.dims

    @property
    def components(self) -> Tuple[ScalarDist, ...]:
        """x0 components followed by the stacked disturbance components."""
        return self.x0_dists + self.w_dists


@dataclass
class SolverDiagnostics:
    iterations: int = 0
    inner_iterations: int = 0
    function_evaluations: int = 0
    max_violation: float = float('inf')
    stationarity: float = float('inf')
    converged: bool = False
    status: str = "not started"
    penalty: float = 0.0
    merit_history: List[Tuple[float, float]] = field(default_factory=list)
    objective_history: List[float] = field(default_factory=list)


@dataclass
class Solution:
    controller: Controller
    risk: RiskAllocation
    objective: float
    cost: float
    distances: List[float]
    diagnostics: SolverDiagnostics = field(default_factory=SolverDiagnostics)


@dataclass(frozen=True)
class McConfig:
    sample_count: int = MC_DEFAULTS['sample_count']
    seed: int = MC_DEFAULTS['seed']
    bins: int = MC_DEFAULTS['bins']
    range_sigmas: float = MC_DEFAULTS['range_sigmas']
    chunk_size: int = MC_DEFAULTS['chunk_size']
    path_samples: int = MC_DEFAULTS['path_samples']
    workers: int = 1

    def __post_init__(self):
        if self.sample_count < MC_DEFAULTS['min_sample_count']:
            raise ValueError(f"sample_count must be >= {MC_DEFAULTS['min_sample_count']}")
        if self.bins < 1 or self.chunk_size < 1 or self.path_samples < 0:
            raise ValueError("bins and chunk_size must be positive")


@dataclass
class McReport:
    sample_count: int
    seed: int
    cost_mean: float
    cost_stderr: float
    state_rates: np.ndarray
    input_rates: np.ndarray
    state_joint_rate: float
    input_joint_rate: float
    state_stage_rate: float
    input_stage_rate: float
    terminal_samples: np.ndarray
    histograms: List[Tuple[np.ndarray, np.ndarray]]
    ks_distances: List[float]
    state_rate_stderr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    input_rate_stderr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    state_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    state_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample_paths: np.ndarray = field(default_factory=lambda: np.zeros(0))


def dict_to_dist(data: Dict[str, Any]) -> ScalarDist:
    """Convert a scenario-file dictionary to a ScalarDist"""
    family = data['family']
    if family == 'gaussian':
        return ScalarDist.gaussian(data['mean'], data['variance'])
    if family == 'laplace':
        return ScalarDist.laplace(data['location'], data['scale'])
    if family == 'mixture':
        return ScalarDist.mixture(data['weights'], data['means'], data['variances'])
    raise ValueError(f"Unknown distribution family: {family}")
