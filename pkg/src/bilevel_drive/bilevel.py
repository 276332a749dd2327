"""Gradient-free upper level over the batched trajectory optimizer.

Each iteration samples behavior vectors from a Gaussian, solves the
batched lower level (QP + projection), ranks the samples by constraint
residual and by residual-augmented driving cost, and refits the sampling
distribution to the elite set with exponentiated-cost weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .basis import PolynomialBasis, TrajectoryCoeffs, eval_trajectory
from .batch_qp import (
    NumericalFailure,
    QPSolutionBatch,
    TrackingWeights,
    build_qp_structure,
    build_rhs_batch,
    solve_batch,
)
from .behavior import BehaviorParams, ParamLayout, WarmStartSource
from .constraints import PlanningScene
from .projection import ProjectionBatchResult, ProjectionConfig, ProjectionOperator

log = logging.getLogger(__name__)

_COV_REG = 1e-6


@dataclass(frozen=True)
class SamplingDistribution:
    """Gaussian over flattened behavior vectors."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"cov shape {cov.shape} does not match mean dim {mean.shape[0]}")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        try:
            chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            chol = np.linalg.cholesky(self.cov + 10 * _COV_REG * np.eye(self.cov.shape[0]))
        z = rng.standard_normal((n, self.mean.shape[0]))
        return self.mean[None, :] + z @ chol.T


@dataclass(frozen=True)
class EliteRecord:
    """One ranked sample: behavior, projected trajectory, and scores."""

    index: int
    params: BehaviorParams
    coeffs: TrajectoryCoeffs
    upper_cost: float
    residual: float
    augmented_cost: float


@dataclass(frozen=True)
class BiLevelConfig:
    batch_size: int = 1000
    constraint_elites: int = 150
    elites: int = 50
    iterations: int = 5
    eta: float = 0.7
    gamma: float = 0.9
    residual_weight: float = 1.0
    init_mean: np.ndarray = field(default_factory=lambda: np.zeros(8))
    init_cov: np.ndarray = field(default_factory=lambda: np.eye(8))

    def __post_init__(self) -> None:
        if not (self.elites <= self.constraint_elites <= self.batch_size):
            raise ValueError(
                f"need elites <= constraint_elites <= batch_size, got "
                f"{self.elites} / {self.constraint_elites} / {self.batch_size}"
            )
        if not (0.0 < self.eta <= 1.0):
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        object.__setattr__(self, "init_mean", np.asarray(self.init_mean, dtype=float))
        object.__setattr__(self, "init_cov", np.asarray(self.init_cov, dtype=float))


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    elite_mean_upper_cost: float
    best_augmented_cost: float
    cov_trace: float
    residual_min: float
    residual_median: float
    residual_max: float


@dataclass(frozen=True)
class BiLevelResult:
    best: EliteRecord
    diagnostics: list[IterationStats]
    distribution: SamplingDistribution
    degraded: bool = False


def upper_cost(coeffs: TrajectoryCoeffs, basis: PolynomialBasis, v_max: float) -> float:
    """Driving-task cost: summed squared gap between speed and v_max."""
    traj = eval_trajectory(basis, coeffs)
    return float(((traj.speed() - v_max) ** 2).sum())


def upper_cost_batch(xdot: np.ndarray, ydot: np.ndarray, v_max: float) -> np.ndarray:
    return ((np.hypot(xdot, ydot) - v_max) ** 2).sum(axis=-1)


def rank_samples(residuals: np.ndarray, costs: np.ndarray, n: int, q: int, residual_weight: float):
    """Indices of the constraint-elite and elite sets, ties broken by index."""
    order = np.argsort(residuals, kind="stable")
    cons_idx = order[:n]
    aug = costs[cons_idx] + residual_weight * residuals[cons_idx]
    sub = np.lexsort((cons_idx, aug))
    elite_idx = cons_idx[sub[:q]]
    elite_aug = aug[sub[:q]]
    return cons_idx, elite_idx, elite_aug


def select_elites(records: list[EliteRecord], n: int, q: int) -> tuple[list[EliteRecord], list[EliteRecord]]:
    """Split ranked records into the constraint-elite and elite sets.

    The constraint-elite set keeps the n lowest residuals; the elite set
    keeps the q lowest augmented costs among those.  Ties resolve by sample
    index, so the selection is deterministic.
    """
    if n > len(records) or q > n:
        raise ValueError(f"need q <= n <= len(records), got {q} / {n} / {len(records)}")
    residuals = np.array([r.residual for r in records])
    aug = np.array([r.augmented_cost for r in records])
    idx = np.array([r.index for r in records])
    order = np.lexsort((idx, residuals))
    cons = [records[i] for i in order[:n]]
    sub = np.lexsort((idx[order[:n]], aug[order[:n]]))
    elite = [cons[i] for i in sub[:q]]
    return cons, elite


class DegenerateWeights(RuntimeError):
    """All elite weights underflowed; the update fell back to uniform."""


def _elite_weights(aug_costs: np.ndarray, gamma: float) -> np.ndarray:
    # exp(-(c - min c)/gamma) equals the raw exponentiated weights up to a
    # common factor that cancels in the normalized sums, and keeps the
    # largest weight at 1 regardless of the cost scale.
    w = np.exp(-(aug_costs - aug_costs.min()) / gamma)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        log.warning("elite weights degenerated; falling back to uniform")
        return np.full_like(aug_costs, 1.0 / aug_costs.shape[0])
    return w / total


def update_distribution(
    dist: SamplingDistribution,
    elite_params: np.ndarray,
    elite_aug_costs: np.ndarray,
    eta: float,
    gamma: float,
) -> SamplingDistribution:
    """Exponentiated-cost refit of the sampling Gaussian.

    mean' = (1 - eta) mean + eta * sum(s_j p_j) / sum(s_j) and similarly for
    the covariance around the updated mean, followed by a PSD-preserving
    diagonal regularization.
    """
    elite_params = np.atleast_2d(np.asarray(elite_params, dtype=float))
    w = _elite_weights(np.asarray(elite_aug_costs, dtype=float), gamma)
    mean_new = (1.0 - eta) * dist.mean + eta * (w @ elite_params)
    diffs = elite_params - mean_new[None, :]
    cov_elite = diffs.T @ (w[:, None] * diffs)
    cov_new = (1.0 - eta) * dist.cov + eta * cov_elite + _COV_REG * np.eye(dist.mean.shape[0])
    return SamplingDistribution(mean=mean_new, cov=0.5 * (cov_new + cov_new.T))


class LowerLevelSolver:
    """Bundles the factorized QP and projection operators for reuse.

    Both KKT systems are factorized exactly once at construction; every
    subsequent batch, of any size, reuses them.
    """

    def __init__(
        self,
        basis: PolynomialBasis,
        weights: TrackingWeights,
        layout: ParamLayout,
        proj_config: ProjectionConfig,
        num_obstacles: int,
    ):
        self.basis = basis
        self.layout = layout
        self.qp = build_qp_structure(basis, weights, layout)
        self.projector = ProjectionOperator(basis, self.qp, num_obstacles, proj_config)

    def solve(self, param_batch: np.ndarray, scene: PlanningScene) -> tuple[QPSolutionBatch, ProjectionBatchResult]:
        rhs = build_rhs_batch(self.qp, param_batch, scene.initial_state)
        sol = solve_batch(self.qp, rhs)
        proj = self.projector.project(sol.xi, rhs.b_batch, scene.spec)
        return sol, proj

    def velocities(self, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.basis.num_coeffs
        return xi[:n].T @ self.basis.Wdot.T, xi[n:].T @ self.basis.Wdot.T


def solve_bilevel(
    scene: PlanningScene,
    solver: LowerLevelSolver,
    config: BiLevelConfig,
    rng: np.random.Generator,
    warm_start: WarmStartSource | None = None,
    trace_hook=None,
) -> BiLevelResult:
    """Run the full sample / solve / project / rank / refit loop.

    The first iteration draws from ``warm_start`` when given, otherwise
    from the configured Gaussian; later iterations always use the adapted
    Gaussian.  Returns the elite record with the lowest augmented cost at
    the last completed iteration; if an iteration after the first fails
    numerically, the best result so far is returned with ``degraded=True``.
    """
    dist = SamplingDistribution(config.init_mean, config.init_cov)
    diagnostics: list[IterationStats] = []
    best: EliteRecord | None = None
    degraded = False

    for it in range(1, config.iterations + 1):
        if it == 1 and warm_start is not None:
            params = warm_start.draw(config.batch_size)
        else:
            params = dist.sample(config.batch_size, rng)
        try:
            _, proj = solver.solve(params, scene)
        except NumericalFailure:
            if best is None:
                raise
            log.warning("bilevel iteration %d failed; returning best-so-far", it)
            degraded = True
            break

        xd, yd = solver.velocities(proj.xi)
        costs = upper_cost_batch(xd, yd, scene.spec.v_max)
        residuals = proj.residuals
        _, elite_idx, elite_aug = rank_samples(
            residuals, costs, config.constraint_elites, config.elites, config.residual_weight
        )
        if trace_hook is not None:
            trace_hook(it, params, proj, costs, elite_idx)

        j = int(elite_idx[0])
        best = EliteRecord(
            index=j,
            params=BehaviorParams.from_vector(params[j], solver.layout),
            coeffs=TrajectoryCoeffs.from_stacked(proj.xi[:, j]),
            upper_cost=float(costs[j]),
            residual=float(residuals[j]),
            augmented_cost=float(elite_aug[0]),
        )
        dist = update_distribution(dist, params[elite_idx], elite_aug, config.eta, config.gamma)
        diagnostics.append(
            IterationStats(
                iteration=it,
                elite_mean_upper_cost=float(costs[elite_idx].mean()),
                best_augmented_cost=float(elite_aug[0]),
                cov_trace=float(np.trace(dist.cov)),
                residual_min=float(residuals.min()),
                residual_median=float(np.median(residuals)),
                residual_max=float(residuals.max()),
            )
        )

    assert best is not None
    return BiLevelResult(best=best, diagnostics=diagnostics, distribution=dist, degraded=degraded)
