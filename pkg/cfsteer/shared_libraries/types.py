"""Scenario file schema (version 1)."""
from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .constants import MC_DEFAULTS, QUADRATURE_DEFAULTS, SOLVER_DEFAULTS

Matrix = List[List[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class GaussianSpec(_Strict):
    family: Literal['gaussian']
    mean: float
    variance: float = Field(ge=0, description="Variance, zero for a point mass")


class LaplaceSpec(_Strict):
    family: Literal['laplace']
    location: float
    scale: float = Field(gt=0, description="Scale b, variance 2 b^2")


class MixtureSpec(_Strict):
    family: Literal['mixture']
    weights: List[float] = Field(min_length=1)
    means: List[float] = Field(min_length=1)
    variances: List[float] = Field(min_length=1)

    @model_validator(mode='after')
    def _check_components(self):
        if not len(self.weights) == len(self.means) == len(self.variances):
            raise ValueError("weights, means and variances must have equal length")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if any(v < 0 for v in self.variances):
            raise ValueError("variances must be >= 0")
        return self


DistSpec = Annotated[Union[GaussianSpec, LaplaceSpec, MixtureSpec], Field(discriminator='family')]


class DoubleIntegratorSpec(_Strict):
    """Planar double integrator with state [x, x_dot, y, y_dot] and input [a_x, a_y]."""
    type: Literal['double_integrator']
    horizon: int = Field(ge=1)
    dt: float = Field(gt=0)
    disturbance_entry: Literal['velocity', 'input'] = Field(
        default='velocity', description="D_k adds dt * w to the velocities, or D_k = B_k")


class ExplicitSystemSpec(_Strict):
    """Per-stage matrices; a single matrix is repeated over the horizon."""
    type: Literal['explicit']
    horizon: int = Field(ge=1)
    A: Union[Matrix, List[Matrix]]
    B: Union[Matrix, List[Matrix]]
    D: Union[Matrix, List[Matrix]]


SystemSpec = Annotated[Union[DoubleIntegratorSpec, ExplicitSystemSpec], Field(discriminator='type')]


class DisturbanceSpec(_Strict):
    """Either p components repeated at every stage or all N p components stacked."""
    per_stage: Optional[List[DistSpec]] = None
    stacked: Optional[List[DistSpec]] = None

    @model_validator(mode='after')
    def _one_form(self):
        if (self.per_stage is None) == (self.stacked is None):
            raise ValueError("give exactly one of per_stage or stacked")
        return self


class HyperplaneSpec(_Strict):
    """normal . z_k <= bound for every k in the inclusive stage range."""
    normal: List[float] = Field(min_length=1)
    bound: float
    stages: List[int] = Field(min_length=2, max_length=2)

    @field_validator('stages')
    @classmethod
    def _ordered(cls, value: List[int]) -> List[int]:
        if value[0] > value[1] or value[0] < 0:
            raise ValueError("stages must be [first, last] with 0 <= first <= last")
        return value


class ThresholdSpec(_Strict):
    state: float = Field(ge=0, lt=1)
    input: float = Field(ge=0, lt=1)


class WeightSpec(_Strict):
    """Stage weights; a flat list is a diagonal."""
    Q: Union[List[float], Matrix]
    R: Union[List[float], Matrix]
    terminal_Q: Optional[Union[List[float], Matrix]] = None
    penalties: List[float] = Field(alias='lambda')

    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    @field_validator('penalties')
    @classmethod
    def _nonnegative(cls, value: List[float]) -> List[float]:
        if any(lam < 0 for lam in value):
            raise ValueError("lambda weights must be >= 0")
        return value


class WaypointSegment(_Strict):
    stages: List[int] = Field(min_length=2, max_length=2)
    start: List[float] = Field(min_length=2, max_length=2)
    end: List[float] = Field(min_length=2, max_length=2)


class ReferenceSpec(_Strict):
    """Waypoint segments (positions interpolated linearly, velocities from the per-stage
    displacement) or an explicit (N+1) x n reference."""
    waypoints: Optional[List[WaypointSegment]] = None
    position_indices: List[int] = Field(default_factory=lambda: [0, 2])
    velocity_indices: List[int] = Field(default_factory=lambda: [1, 3])
    explicit: Optional[Matrix] = None

    @model_validator(mode='after')
    def _one_form(self):
        if (self.waypoints is None) == (self.explicit is None):
            raise ValueError("give exactly one of waypoints or explicit")
        return self


class QuadratureConfig(_Strict):
    truncation: Literal['auto', 'fixed'] = 'auto'
    upper: Optional[float] = Field(default=None, gt=0)
    multiplier: float = Field(default=QUADRATURE_DEFAULTS['multiplier'], gt=0)
    nodes_per_unit: int = Field(default=QUADRATURE_DEFAULTS['nodes_per_unit'],
                                ge=QUADRATURE_DEFAULTS['min_nodes_per_unit'])
    absolute_tolerance: float = Field(default=QUADRATURE_DEFAULTS['absolute_tolerance'], gt=0)

    @model_validator(mode='after')
    def _upper_for_fixed(self):
        if self.truncation == 'fixed' and self.upper is None:
            raise ValueError("fixed truncation needs upper")
        return self


class SolverConfig(_Strict):
    max_outer_iterations: int = Field(default=SOLVER_DEFAULTS['max_outer_iterations'], ge=1)
    max_inner_iterations: int = Field(default=SOLVER_DEFAULTS['max_inner_iterations'], ge=1)
    feasibility_tolerance: float = Field(default=SOLVER_DEFAULTS['feasibility_tolerance'], gt=0)
    stationarity_tolerance: float = Field(default=SOLVER_DEFAULTS['stationarity_tolerance'], gt=0)
    initial_penalty: float = Field(default=SOLVER_DEFAULTS['initial_penalty'], gt=0)
    delta_min: float = Field(default=SOLVER_DEFAULTS['delta_min'], gt=0)
    fixed_risk: bool = False
    gradient: Literal['analytic', 'finite_difference'] = SOLVER_DEFAULTS['gradient']


class MonteCarloConfig(_Strict):
    sample_count: int = Field(default=MC_DEFAULTS['sample_count'], ge=MC_DEFAULTS['min_sample_count'])
    seed: int = Field(default=MC_DEFAULTS['seed'], ge=0)
    bins: int = Field(default=MC_DEFAULTS['bins'], ge=1)
    range_sigmas: float = Field(default=MC_DEFAULTS['range_sigmas'], gt=0)
    ks_tolerances: Optional[List[float]] = None


class ScenarioFile(_Strict):
    """Top-level scenario document."""
    schema_version: Literal[1]
    name: str
    description: str = ""
    system: SystemSpec
    initial_distribution: List[DistSpec] = Field(min_length=1)
    disturbance: DisturbanceSpec
    state_constraints: List[HyperplaneSpec] = Field(default_factory=list)
    input_constraints: List[HyperplaneSpec] = Field(default_factory=list)
    thresholds: ThresholdSpec
    weights: WeightSpec
    reference: ReferenceSpec
    target: List[DistSpec] = Field(min_length=1)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    mc: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
