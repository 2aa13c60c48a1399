"""Monte-Carlo validation of a steering controller.

Samples are drawn in fixed-size chunks. Chunk c of component j draws from
its own stream, seeded with SeedSequence(seed, spawn_key=(c, j)), so the
draws do not depend on how chunks are spread over workers. Per-chunk
results are integer counts, sample costs and state sums, reduced in chunk
order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats

from ..shared_libraries.constants import KS_COEFFICIENT_95
from ..shared_libraries.models import (
    ConstraintKind, Controller, HalfspaceConstraint, LiftedSystem, McConfig, McReport, SteeringProblem,
    TargetDensity
)
from . import cf
from .constraints import boole_decompose
from .lift import closed_loop, lift
from .steer import stacked_weights

logger = logging.getLogger(__name__)


@dataclass
class _ChunkResult:
    costs: np.ndarray
    state_counts: np.ndarray
    input_counts: np.ndarray
    state_joint: int
    input_joint: int
    state_stage_counts: np.ndarray
    input_stage_counts: np.ndarray
    terminal: np.ndarray
    state_sum: np.ndarray
    state_sumsq: np.ndarray
    paths: np.ndarray


def chunk_streams(seed: int, chunk: int, components: int) -> List[np.random.Generator]:
    """One generator per component for a chunk."""
    return [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk, j)))
            for j in range(components)]


def _violations(values: np.ndarray, constraints: Sequence[HalfspaceConstraint], width: int) -> np.ndarray:
    """Boolean (samples, constraints) matrix of normal . x_k > bound events."""
    out = np.zeros((values.shape[0], len(constraints)), dtype=bool)
    for index, hc in enumerate(constraints):
        block = values[:, hc.stage * width:(hc.stage + 1) * width]
        out[:, index] = block @ hc.normal > hc.bound
    return out


def _stage_events(violations: np.ndarray, constraints: Sequence[HalfspaceConstraint],
                  stage_list: Sequence[int]) -> np.ndarray:
    counts = np.zeros(len(stage_list), dtype=np.int64)
    for row, k in enumerate(stage_list):
        cols = [i for i, hc in enumerate(constraints) if hc.stage == k]
        if cols:
            counts[row] = int(np.any(violations[:, cols], axis=1).sum())
    return counts


class _Simulator:

    def __init__(self, problem: SteeringProblem, ctrl: Controller, cfg: McConfig, lifted: LiftedSystem):
        self.problem = problem
        self.ctrl = ctrl
        self.cfg = cfg
        self.lifted = lifted
        self.P = closed_loop(lifted, ctrl)
        self.Q_bar, self.R_bar = stacked_weights(problem)
        slots = boole_decompose(problem)
        self.state_constraints = [s.constraint for s in slots if s.constraint.kind == ConstraintKind.STATE]
        self.input_constraints = [s.constraint for s in slots if s.constraint.kind == ConstraintKind.INPUT]
        self.state_stages = sorted({hc.stage for hc in self.state_constraints})
        self.input_stages = sorted({hc.stage for hc in self.input_constraints})

    def draw(self, chunk: int, size: int) -> np.ndarray:
        """(size, n + N p) draws of x0 followed by the stacked disturbance."""
        components = self.problem.components
        streams = chunk_streams(self.cfg.seed, chunk, len(components))
        return np.column_stack([cf.sample(dist, rng, size) for dist, rng in zip(components, streams)])

    def run_chunk(self, chunk: int) -> _ChunkResult:
        lifted = self.lifted
        start = chunk * self.cfg.chunk_size
        size = min(self.cfg.chunk_size, self.cfg.sample_count - start)
        draws = self.draw(chunk, size)
        xi = draws[:, :lifted.n] @ lifted.A.T + draws[:, lifted.n:] @ lifted.D.T
        X = xi @ self.P.T + lifted.B @ self.ctrl.v
        U = xi @ self.ctrl.K.T + self.ctrl.v
        error = X - self.problem.reference
        costs = np.einsum('ij,jk,ik->i', error, self.Q_bar, error) + np.einsum('ij,jk,ik->i', U, self.R_bar, U)
        state_v = _violations(X, self.state_constraints, lifted.n)
        input_v = _violations(U, self.input_constraints, lifted.m)
        paths_left = max(0, self.cfg.path_samples - start)
        return _ChunkResult(
            costs=costs,
            state_counts=state_v.sum(axis=0).astype(np.int64),
            input_counts=input_v.sum(axis=0).astype(np.int64),
            state_joint=int(np.any(state_v, axis=1).sum()),
            input_joint=int(np.any(input_v, axis=1).sum()),
            state_stage_counts=_stage_events(state_v, self.state_constraints, self.state_stages),
            input_stage_counts=_stage_events(input_v, self.input_constraints, self.input_stages),
            terminal=X[:, lifted.horizon * lifted.n:],
            state_sum=X.sum(axis=0),
            state_sumsq=(X * X).sum(axis=0),
            paths=X[:paths_left].reshape(-1, lifted.horizon + 1, lifted.n),
        )


def simulate(problem: SteeringProblem, ctrl: Controller, cfg: Optional[McConfig] = None,
             lifted: Optional[LiftedSystem] = None) -> McReport:
    """Simulate closed-loop trajectories and collect violation rates, costs and terminal statistics.

    Args:
        problem (SteeringProblem): the instance
        ctrl (Controller): controller to validate
        cfg (McConfig, optional): sample count, seed and histogram settings
        lifted (LiftedSystem, optional): precomputed lift

    Returns:
        McReport: empirical cost, rates with standard errors, histograms and KS distances
    """
    cfg = cfg or McConfig()
    lifted = lifted or lift(problem.system)
    sim = _Simulator(problem, ctrl, cfg, lifted)
    chunks = range(int(np.ceil(cfg.sample_count / cfg.chunk_size)))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(sim.run_chunk, chunks))
    else:
        results = [sim.run_chunk(c) for c in chunks]

    M = cfg.sample_count
    costs = np.concatenate([r.costs for r in results])
    state_rates = sum(r.state_counts for r in results) / M if sim.state_constraints else np.zeros(0)
    input_rates = sum(r.input_counts for r in results) / M if sim.input_constraints else np.zeros(0)
    state_stage = sum(r.state_stage_counts for r in results) / M if sim.state_stages else np.zeros(0)
    input_stage = sum(r.input_stage_counts for r in results) / M if sim.input_stages else np.zeros(0)
    terminal = np.concatenate([r.terminal for r in results])
    state_sum = np.sum([r.state_sum for r in results], axis=0)
    state_sumsq = np.sum([r.state_sumsq for r in results], axis=0)
    state_mean = state_sum / M
    state_std = np.sqrt(np.maximum(state_sumsq / M - state_mean ** 2, 0.0))

    histograms, ks = [], []
    for i, marginal in enumerate(problem.target.marginals):
        samples = terminal[:, i]
        spread = max(np.std(samples), np.sqrt(marginal.variance()), 1e-12)
        lo = min(samples.mean(), marginal.mean()) - cfg.range_sigmas * spread
        hi = max(samples.mean(), marginal.mean()) + cfg.range_sigmas * spread
        density, edges = np.histogram(samples, bins=cfg.bins, range=(lo, hi), density=True)
        histograms.append((density, edges))
        ks.append(float(stats.kstest(samples, lambda z, d=marginal: cf.cdf(d, z)).statistic))

    report = McReport(
        sample_count=M,
        seed=cfg.seed,
        cost_mean=float(costs.mean()),
        cost_stderr=float(costs.std(ddof=1) / np.sqrt(M)),
        state_rates=np.asarray(state_rates, dtype=float),
        input_rates=np.asarray(input_rates, dtype=float),
        state_joint_rate=sum(r.state_joint for r in results) / M,
        input_joint_rate=sum(r.input_joint for r in results) / M,
        state_stage_rate=float(np.mean(state_stage)) if state_stage.size else 0.0,
        input_stage_rate=float(np.mean(input_stage)) if input_stage.size else 0.0,
        terminal_samples=terminal,
        histograms=histograms,
        ks_distances=ks,
        state_rate_stderr=rate_stderr(state_rates, M),
        input_rate_stderr=rate_stderr(input_rates, M),
        state_mean=state_mean.reshape(lifted.horizon + 1, lifted.n),
        state_std=state_std.reshape(lifted.horizon + 1, lifted.n),
        sample_paths=np.concatenate([r.paths for r in results]),
    )
    logger.info(f"Monte Carlo ({M} samples, seed {cfg.seed}): J_MC {report.cost_mean:.4f} "
                f"+/- {report.cost_stderr:.4f}, state violations {report.state_joint_rate:.4f}, "
                f"input violations {report.input_joint_rate:.4f}")
    return report


def rate_stderr(rates: np.ndarray, sample_count: int) -> np.ndarray:
    """Binomial standard error sqrt(p (1 - p) / M)."""
    rates = np.asarray(rates, dtype=float)
    return np.sqrt(rates * (1.0 - rates) / sample_count)


def derive_ks_tolerances(sample_count: int, cdf_gaps: Optional[Sequence[float]] = None,
                         dim: Optional[int] = None) -> List[float]:
    """Per-dimension KS tolerance 1.36 / sqrt(M) + sup |F_achieved - F_target|.

    The second term is the Kolmogorov distance between the achieved terminal
    marginal and its target. Without gaps this is the same-distribution bound.
    """
    base = KS_COEFFICIENT_95 / np.sqrt(sample_count)
    if cdf_gaps is None:
        return [float(base)] * (dim or 0)
    return [float(base + min(1.0, max(0.0, g))) for g in cdf_gaps]


def empirical_terminal_check(report: McReport, target: TargetDensity,
                             tolerances: Optional[Sequence[float]] = None) -> List[bool]:
    """Pass/fail per terminal dimension: KS distance to the target marginal below tolerance.

    Tolerances default to the same-distribution bound 1.36 / sqrt(M).
    """
    if not report.histograms:
        raise ValueError("Report has no terminal histograms")
    if tolerances is None:
        tolerances = derive_ks_tolerances(report.sample_count, dim=target.dim)
    if len(tolerances) != target.dim:
        raise ValueError(f"Need {target.dim} tolerances, got {len(tolerances)}")
    results = []
    for i, marginal in enumerate(target.marginals):
        ks = float(stats.kstest(report.terminal_samples[:, i], lambda z, d=marginal: cf.cdf(d, z)).statistic)
        results.append(ks < tolerances[i])
        if ks >= tolerances[i]:
            logger.warning(f"Terminal dimension {i}: KS {ks:.4f} >= tolerance {tolerances[i]:.4f}")
    return results
