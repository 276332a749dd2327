"""Receding-horizon planners behind a common interface.

Every planner consumes the same observation vector and world-derived
constraint specification, produces trajectory coefficients through the
shared lower level (batch QP + projection), and emits clipped
(acceleration, steering) commands on the simulator control grid.  The
bi-level planner adapts its sampling distribution over iterations; the
grid / random / goal baselines perform exactly one sampling iteration,
and the vanilla baseline solves a single fixed-set-point lower level.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .basis import TrajectoryCoeffs, build_basis, flat_to_controls
from .batch_qp import TrackingWeights
from .behavior import BehaviorParams, ParamLayout, WarmStartSource
from .bilevel import (
    BiLevelConfig,
    EliteRecord,
    LowerLevelSolver,
    SamplingDistribution,
    rank_samples,
    solve_bilevel,
    upper_cost_batch,
)
from .constraints import ConstraintSpec, PlanningScene
from .highway import World, observe
from .projection import ProjectionConfig

SENTINEL_DISTANCE = 1e4


@dataclass(frozen=True)
class PlannerEnvConfig:
    """Planning-side limits, horizon discretization, and search budgets."""

    v_max: float = 20.0
    a_max: float = 6.0
    kappa_max: float = 0.2
    c_max: float = 3.0
    v_min: float = 0.5
    wheelbase: float = 2.5
    horizon: float = 10.0
    num_samples: int = 50
    order: int = 10
    basis_family: str = "bernstein"
    m_seg: int = 4
    max_obstacles: int = 6
    obstacle_range: float = 120.0
    batch_size: int = 250
    constraint_elites: int = 150
    elites: int = 50
    iterations: int = 5
    eta: float = 0.7
    gamma: float = 0.9
    residual_weight: float = 1.0
    sigma_offset: float = 1.5
    sigma_speed: float = 3.0
    proj_rho: float = 1.0
    proj_iters: int = 50
    proj_tol: float = 1e-3
    k_p: float = 20.0
    k_v: float = 2.0 * math.sqrt(20.0)
    w_smooth: float = 1.0
    w_offset: float = 20.0
    w_speed: float = 20.0
    warm_start_cycles: bool = True

    def tracking_weights(self) -> TrackingWeights:
        return TrackingWeights(
            k_p=self.k_p, k_v=self.k_v, w_smooth=self.w_smooth,
            w_offset=self.w_offset, w_speed=self.w_speed,
        )

    def projection_config(self) -> ProjectionConfig:
        return ProjectionConfig(rho=self.proj_rho, max_iters=self.proj_iters, tol=self.proj_tol)

    @property
    def steer_limit(self) -> float:
        return math.atan(self.kappa_max * self.wheelbase)


def combined_ellipse(
    ego_length: float, ego_width: float, obs_length: float, obs_width: float
) -> tuple[float, float]:
    """Semi-axes of the ellipse circumscribing the Minkowski-inflated footprint."""
    half_x = (ego_length + obs_length) / 2.0
    half_y = (ego_width + obs_width) / 2.0
    return math.sqrt(2.0) * half_x, math.sqrt(2.0) * half_y


def ego_flat_state(world: World, wheelbase: float) -> np.ndarray:
    """(x, y, xdot, ydot, xddot, yddot) of the ego from state plus last controls."""
    ego = world.ego
    c, s = math.cos(ego.psi), math.sin(ego.psi)
    psi_dot = ego.v * math.tan(ego.steer) / wheelbase
    return np.array(
        [
            ego.x,
            ego.y,
            ego.v * c,
            ego.v * s,
            ego.accel * c - ego.v * psi_dot * s,
            ego.accel * s + ego.v * psi_dot * c,
        ]
    )


def build_scene(world: World, env: PlannerEnvConfig, times: np.ndarray) -> PlanningScene:
    """Constraint spec for one cycle: nearest neighbors, constant-velocity predictions.

    Neighbor slots are padded with far-away sentinels so the projection
    operator always sees ``env.max_obstacles`` obstacle rows and its
    factorized system stays valid.
    """
    ego = world.ego
    ranked = sorted(
        (veh for veh in world.neighbors if abs(veh.x - ego.x) <= env.obstacle_range),
        key=lambda veh: (veh.x - ego.x) ** 2 + (veh.y - ego.y) ** 2,
    )[: env.max_obstacles]

    m = times.shape[0]
    ox = np.empty((env.max_obstacles, m))
    oy = np.empty((env.max_obstacles, m))
    for i in range(env.max_obstacles):
        if i < len(ranked):
            veh = ranked[i]
            ox[i] = veh.x + veh.v * times
            oy[i] = veh.y + veh.lateral_rate * times
        else:
            ox[i] = ego.x + SENTINEL_DISTANCE + 100.0 * i
            oy[i] = 0.0

    a_axis, b_axis = combined_ellipse(ego.length, ego.width, 5.0, 2.0)
    spec = ConstraintSpec(
        obstacles_x=ox,
        obstacles_y=oy,
        ellipse_a=a_axis,
        ellipse_b=b_axis,
        v_max=env.v_max,
        a_max=env.a_max,
        kappa_max=env.kappa_max,
        c_max=env.c_max,
        y_lb=world.road.y_lower,
        y_ub=world.road.y_upper,
        v_min=env.v_min,
        road_curvature=world.road.curvature,
    )
    return PlanningScene(
        initial_state=ego_flat_state(world, env.wheelbase),
        spec=spec,
        lane_centers=world.road.lane_centers,
    )


@dataclass(frozen=True)
class Plan:
    coeffs: TrajectoryCoeffs
    params: BehaviorParams
    diagnostics: dict = field(default_factory=dict)


class PlannerFailure(RuntimeError):
    """The planner could not produce a usable plan this cycle."""


class BasePlanner:
    """Shared machinery: scene building, lower-level reuse, control emission."""

    name = "base"

    def __init__(self, env: PlannerEnvConfig, seed: int = 0, with_goal: bool = False,
                 weights: TrackingWeights | None = None):
        self.env = env
        self.seed = seed
        self.basis = build_basis(env.order, env.num_samples, env.horizon, family=env.basis_family)
        self.layout = ParamLayout(m_seg=env.m_seg, with_goal=with_goal)
        self.solver = LowerLevelSolver(
            self.basis,
            weights if weights is not None else env.tracking_weights(),
            self.layout,
            env.projection_config(),
            env.max_obstacles,
        )
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def plan(self, observation: np.ndarray, scene: PlanningScene) -> Plan:
        raise NotImplementedError

    def plan_cycle(self, world: World) -> tuple[np.ndarray, np.ndarray, dict]:
        start = time.perf_counter()
        observation = observe(world)
        scene = build_scene(world, self.env, self.basis.times)
        plan = self.plan(observation, scene)
        accels, steers = self.controls_on_grid(plan.coeffs, world.dt)
        info = {"solve_time": time.perf_counter() - start, **plan.diagnostics}
        return accels, steers, info

    def controls_on_grid(self, coeffs: TrajectoryCoeffs, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Flatness conversion on the simulator grid, clipped to actuator bounds."""
        n_ctrl = int(self.env.horizon / dt)
        times = np.arange(n_ctrl) * dt
        controls = flat_to_controls(self.basis, coeffs, self.env.wheelbase, times=times)
        accels = np.clip(controls.accel, -self.env.a_max, self.env.a_max)
        steers = np.clip(controls.delta, -self.env.steer_limit, self.env.steer_limit)
        return accels, steers

    def initial_distribution(self, scene: PlanningScene) -> SamplingDistribution:
        """Gaussian centered on the current lane center and current speed."""
        env = self.env
        y0 = scene.initial_state[1]
        centers = scene.lane_centers
        lane_y = float(centers[np.argmin(np.abs(centers - y0))]) if centers.size else y0
        speed = float(np.hypot(scene.initial_state[2], scene.initial_state[3]))
        mean = np.concatenate([np.full(env.m_seg, lane_y), np.full(env.m_seg, speed)])
        cov = np.diag(
            np.concatenate(
                [np.full(env.m_seg, env.sigma_offset**2), np.full(env.m_seg, env.sigma_speed**2)]
            )
        )
        return SamplingDistribution(mean=mean, cov=cov)

    def evaluate_batch(self, scene: PlanningScene, params: np.ndarray) -> tuple[EliteRecord, dict]:
        """One lower-level sweep over a parameter batch; best record by augmented cost."""
        _, proj = self.solver.solve(params, scene)
        xd, yd = self.solver.velocities(proj.xi)
        costs = upper_cost_batch(xd, yd, scene.spec.v_max)
        n = min(self.env.constraint_elites, params.shape[0])
        q = min(self.env.elites, n)
        _, elite_idx, elite_aug = rank_samples(
            proj.residuals, costs, n, q, self.env.residual_weight
        )
        j = int(elite_idx[0])
        record = EliteRecord(
            index=j,
            params=BehaviorParams.from_vector(params[j], self.layout),
            coeffs=TrajectoryCoeffs.from_stacked(proj.xi[:, j]),
            upper_cost=float(costs[j]),
            residual=float(proj.residuals[j]),
            augmented_cost=float(elite_aug[0]),
        )
        diag = {
            "residual": record.residual,
            "upper_cost": record.upper_cost,
            "proj_iterations": proj.iterations_used,
            "batch": int(params.shape[0]),
        }
        return record, diag


class MPCBiLevelPlanner(BasePlanner):
    """Receding-horizon wrapper around the full bi-level optimizer."""

    name = "mpc-bilevel"

    def __init__(self, env: PlannerEnvConfig, seed: int = 0,
                 warm_start_file: WarmStartSource | None = None):
        super().__init__(env, seed)
        self.warm_source = warm_start_file
        self._warm_mean: np.ndarray | None = None

    def reset(self) -> None:
        super().reset()
        self._warm_mean = None

    def plan(self, observation: np.ndarray, scene: PlanningScene) -> Plan:
        env = self.env
        dist = self.initial_distribution(scene)
        if env.warm_start_cycles and self._warm_mean is not None:
            dist = SamplingDistribution(mean=self._warm_mean, cov=dist.cov)
        config = BiLevelConfig(
            batch_size=env.batch_size,
            constraint_elites=env.constraint_elites,
            elites=env.elites,
            iterations=env.iterations,
            eta=env.eta,
            gamma=env.gamma,
            residual_weight=env.residual_weight,
            init_mean=dist.mean,
            init_cov=dist.cov,
        )
        result = solve_bilevel(scene, self.solver, config, self.rng, warm_start=self.warm_source)
        self._warm_mean = result.best.params.to_vector()
        last = result.diagnostics[-1]
        return Plan(
            coeffs=result.best.coeffs,
            params=result.best.params,
            diagnostics={
                "residual": result.best.residual,
                "upper_cost": result.best.upper_cost,
                "elite_mean_upper_cost": last.elite_mean_upper_cost,
                "cov_trace": last.cov_trace,
                "iterations": len(result.diagnostics),
                "degraded": result.degraded,
            },
        )


class MPCVanillaPlanner(BasePlanner):
    """No behavioral layer: one lower-level solve with fixed set-points."""

    name = "mpc-vanilla"

    def __init__(self, env: PlannerEnvConfig, seed: int = 0, v_desired: float | None = None):
        super().__init__(env, seed)
        self.v_desired = v_desired

    def plan(self, observation: np.ndarray, scene: PlanningScene) -> Plan:
        env = self.env
        y0 = scene.initial_state[1]
        centers = scene.lane_centers
        lane_y = float(centers[np.argmin(np.abs(centers - y0))]) if centers.size else y0
        v_d = self.v_desired if self.v_desired is not None else env.v_max
        params = np.concatenate([np.full(env.m_seg, lane_y), np.full(env.m_seg, v_d)])[None, :]
        record, diag = self.evaluate_batch(scene, params)
        return Plan(coeffs=record.coeffs, params=record.params, diagnostics=diag)


class MPCRandomPlanner(BasePlanner):
    """One iteration of Gaussian sampling; the distribution is never adapted."""

    name = "mpc-random"

    def plan(self, observation: np.ndarray, scene: PlanningScene) -> Plan:
        dist = self.initial_distribution(scene)
        params = dist.sample(self.env.batch_size, self.rng)
        record, diag = self.evaluate_batch(scene, params)
        return Plan(coeffs=record.coeffs, params=record.params, diagnostics=diag)


@dataclass(frozen=True)
class GridSpec:
    """Per-dimension candidate values, enumerated as a capped product."""

    values_per_dim: tuple[tuple[float, ...], ...]
    cap: int = 4096

    def size(self) -> int:
        size = 1
        for vals in self.values_per_dim:
            size *= len(vals)
        return size

    def enumerate(self) -> np.ndarray:
        if self.size() > self.cap:
            raise ValueError(f"grid of {self.size()} points exceeds cap {self.cap}")
        return np.array(list(itertools.product(*self.values_per_dim)))


class MPCGridPlanner(BasePlanner):
    """One sweep over a pre-specified set-point grid."""

    name = "mpc-grid"

    def __init__(self, env: PlannerEnvConfig, seed: int = 0, grid: GridSpec | None = None):
        super().__init__(env, seed)
        self.grid = grid

    def _default_points(self, scene: PlanningScene) -> np.ndarray:
        env = self.env
        velocities = np.array([0.5, 0.75, 1.0]) * env.v_max
        centers = scene.lane_centers if scene.lane_centers.size else np.array([scene.initial_state[1]])
        return np.array(
            [
                np.concatenate([np.full(env.m_seg, y), np.full(env.m_seg, v)])
                for y in centers
                for v in velocities
            ]
        )

    def plan(self, observation: np.ndarray, scene: PlanningScene) -> Plan:
        points = self.grid.enumerate() if self.grid is not None else self._default_points(scene)
        record, diag = self.evaluate_batch(scene, points)
        return Plan(coeffs=record.coeffs, params=record.params, diagnostics=diag)


class BatchMPCGoalPlanner(BasePlanner):
    """One sweep over terminal goal positions entering the equality constraints."""

    name = "batch-mpc-goal"

    def __init__(self, env: PlannerEnvConfig, seed: int = 0):
        weights = TrackingWeights(k_p=env.k_p, k_v=env.k_v, w_smooth=env.w_smooth,
                                  w_offset=0.0, w_speed=0.0)
        super().__init__(env, seed, with_goal=True, weights=weights)

    def plan(self, observation: np.ndarray, scene: PlanningScene) -> Plan:
        env = self.env
        x0 = scene.initial_state[0]
        v0 = float(np.hypot(scene.initial_state[2], scene.initial_state[3]))
        reach = max(v0, 0.3 * env.v_max) * env.horizon
        fractions = np.array([0.5, 0.7, 0.85, 1.0])
        centers = scene.lane_centers if scene.lane_centers.size else np.array([scene.initial_state[1]])
        points = np.array(
            [
                np.concatenate([np.zeros(env.m_seg), np.zeros(env.m_seg), [x0 + f * reach, y]])
                for f in fractions
                for y in centers
            ]
        )
        record, diag = self.evaluate_batch(scene, points)
        return Plan(coeffs=record.coeffs, params=record.params, diagnostics=diag)


PLANNER_REGISTRY = {
    MPCBiLevelPlanner.name: MPCBiLevelPlanner,
    MPCVanillaPlanner.name: MPCVanillaPlanner,
    MPCRandomPlanner.name: MPCRandomPlanner,
    MPCGridPlanner.name: MPCGridPlanner,
    BatchMPCGoalPlanner.name: BatchMPCGoalPlanner,
}


def make_planner(name: str, env: PlannerEnvConfig, seed: int = 0) -> BasePlanner:
    try:
        cls = PLANNER_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown planner {name!r}; choose from {sorted(PLANNER_REGISTRY)}") from None
    return cls(env, seed=seed)
