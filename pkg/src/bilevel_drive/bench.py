"""Benchmark harness: scenario sweeps, metrics, trace and timing emission.

Suites run every planner over the same seed list so traffic configurations
match exactly across planners.  Metric aggregation is a deterministic
ordered reduction over (planner, scenario, seed); the metrics file is
byte-identical across reruns of the same configuration.  Wall-clock solve
times are inherently nondeterministic and therefore go to a sidecar
timings file, never into the metrics file.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import __version__
from . import batch_qp
from .bilevel import BiLevelConfig, solve_bilevel, upper_cost_batch
from .constraints import ConstraintSpec, PlanningScene
from .highway import EpisodeLog, RoadSpec, ScenarioConfig, run_episode
from .planners import PLANNER_REGISTRY, PlannerEnvConfig, make_planner

METRICS_HEADER = "planner,scenario,episodes,collisions,collision_rate,mean_speed,failures"
TIMINGS_HEADER = "planner,scenario,mean_solve_time,total_wall_time"


@dataclass(frozen=True)
class BenchmarkSuite:
    scenarios: tuple[ScenarioConfig, ...]
    planners: tuple[str, ...]
    episodes_per_cell: int = 50
    seeds: tuple[int, ...] = ()
    env: PlannerEnvConfig = field(default_factory=PlannerEnvConfig)
    replan_stride: int = 5
    workers: int = 1

    def __post_init__(self) -> None:
        unknown = [p for p in self.planners if p not in PLANNER_REGISTRY]
        if unknown:
            raise ValueError(f"unknown planners in suite: {unknown}")
        if not self.seeds:
            object.__setattr__(self, "seeds", tuple(range(self.episodes_per_cell)))
        if len(self.seeds) != self.episodes_per_cell:
            raise ValueError("seed list length must equal episodes_per_cell")


@dataclass
class MetricsRow:
    planner: str
    scenario_id: str
    episodes: int
    collisions: int
    collision_rate: float
    mean_speed: float
    mean_solve_time: float
    failures: int

    def metrics_csv(self) -> str:
        return ",".join(
            [
                self.planner,
                self.scenario_id,
                str(self.episodes),
                str(self.collisions),
                repr(self.collision_rate),
                repr(self.mean_speed),
                str(self.failures),
            ]
        )

    def timing_csv(self, wall: float) -> str:
        return ",".join([self.planner, self.scenario_id, repr(self.mean_solve_time), repr(wall)])


def suite_from_dict(data: dict, workers: int | None = None) -> BenchmarkSuite:
    env = PlannerEnvConfig(**data.get("env", {}))
    episodes = int(data.get("episodes_per_cell", 50))
    scenarios = []
    for sc in data["scenarios"]:
        scenarios.append(ScenarioConfig.from_dict(sc))
    return BenchmarkSuite(
        scenarios=tuple(scenarios),
        planners=tuple(data["planners"]),
        episodes_per_cell=episodes,
        seeds=tuple(data.get("seeds", ())),
        env=env,
        replan_stride=int(data.get("replan_stride", 5)),
        workers=workers if workers is not None else int(data.get("workers", 1)),
    )


def load_suite(path: str, workers: int | None = None) -> BenchmarkSuite:
    with open(path, "r", encoding="utf-8") as fh:
        return suite_from_dict(yaml.safe_load(fh), workers=workers)


def _episode_job(args: tuple) -> dict:
    planner_name, scenario, env, stride, seed = args
    planner = make_planner(planner_name, env, seed=seed)
    t0 = time.perf_counter()
    log = run_episode(replace(scenario, seed=seed), planner, replan_stride=stride)
    return {
        "wall": time.perf_counter() - t0,
        "collided": log.collided,
        "failed": log.failed,
        "failure_reason": log.failure_reason,
        "mean_speed": log.mean_speed(),
        "solve_times": log.solve_times(),
        "numerical_failure": "NumericalFailure" in log.failure_reason,
    }


def run_suite(suite: BenchmarkSuite) -> tuple[list[MetricsRow], dict[str, float], bool]:
    """Run every (planner, scenario, seed) cell; ordered deterministic reduction.

    Returns the metric rows, per-cell wall times, and whether any episode hit
    a numerical failure.
    """
    jobs = []
    for planner_name in suite.planners:
        for scenario in suite.scenarios:
            for seed in suite.seeds:
                jobs.append((planner_name, scenario, suite.env, suite.replan_stride, seed))

    cell_wall: dict[str, float] = {}
    results: list[dict]
    if suite.workers > 1:
        with ProcessPoolExecutor(max_workers=suite.workers) as pool:
            results = list(pool.map(_episode_job, jobs))
    else:
        results = [_episode_job(job) for job in jobs]

    rows: list[MetricsRow] = []
    saw_numerical_failure = False
    idx = 0
    for planner_name in suite.planners:
        for scenario in suite.scenarios:
            cell = results[idx : idx + len(suite.seeds)]
            idx += len(suite.seeds)
            collisions = sum(1 for r in cell if r["collided"])
            failures = sum(1 for r in cell if r["failed"])
            saw_numerical_failure |= any(r["numerical_failure"] for r in cell)
            clean_speeds = [r["mean_speed"] for r in cell if not r["collided"] and not r["failed"]]
            solve_times = [t for r in cell for t in r["solve_times"]]
            rows.append(
                MetricsRow(
                    planner=planner_name,
                    scenario_id=scenario.scenario_id,
                    episodes=len(cell),
                    collisions=collisions,
                    collision_rate=collisions / len(cell),
                    mean_speed=float(np.mean(clean_speeds)) if clean_speeds else float("nan"),
                    mean_solve_time=float(np.mean(solve_times)) if solve_times else float("nan"),
                    failures=failures,
                )
            )
            cell_wall[f"{planner_name}/{scenario.scenario_id}"] = float(
                sum(r["wall"] for r in cell)
            )
    return rows, cell_wall, saw_numerical_failure


def _suite_fingerprint(suite: BenchmarkSuite) -> str:
    payload = {
        "planners": list(suite.planners),
        "scenarios": [sc.to_dict() for sc in suite.scenarios],
        "episodes_per_cell": suite.episodes_per_cell,
        "seeds": list(suite.seeds),
        "env": {k: getattr(suite.env, k) for k in sorted(vars(suite.env))},
        "replan_stride": suite.replan_stride,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def write_outputs(suite: BenchmarkSuite, rows: list[MetricsRow], cell_wall: dict[str, float], out_dir: str) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    timings_path = os.path.join(out_dir, "timings.csv")
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row.metrics_csv() + "\n")
    with open(timings_path, "w", encoding="utf-8") as fh:
        fh.write(TIMINGS_HEADER + "\n")
        for row in rows:
            wall = cell_wall.get(f"{row.planner}/{row.scenario_id}", float("nan"))
            fh.write(row.timing_csv(wall) + "\n")
    manifest = {
        "config_hash": _suite_fingerprint(suite),
        "seeds": list(suite.seeds),
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"metrics": metrics_path, "timings": timings_path, "manifest": manifest_path}


def canonical_scene(env: PlannerEnvConfig) -> PlanningScene:
    """Fixed two-lane static-obstacle scene used for traces and timing runs.

    The ego starts at lane 0 doing 12 m/s; three parked vehicles alternate
    lanes ahead, so progress toward v_max requires weaving.  Obstacle rows
    are padded to ``env.max_obstacles`` with far-away sentinels.
    """
    road = RoadSpec(lane_count=2)
    times = np.linspace(0.0, env.horizon, env.num_samples)
    placed = [(45.0, road.lane_center(0)), (80.0, road.lane_center(1)), (120.0, road.lane_center(0))]
    ox = np.empty((env.max_obstacles, env.num_samples))
    oy = np.empty((env.max_obstacles, env.num_samples))
    for i in range(env.max_obstacles):
        if i < len(placed):
            ox[i], oy[i] = placed[i][0], placed[i][1]
        else:
            ox[i], oy[i] = 1e4 + 100.0 * i, 0.0
    spec = ConstraintSpec(
        obstacles_x=ox,
        obstacles_y=oy,
        ellipse_a=7.0710678118654755,
        ellipse_b=2.8284271247461903,
        v_max=env.v_max,
        a_max=env.a_max,
        kappa_max=env.kappa_max,
        c_max=env.c_max,
        y_lb=road.y_lower,
        y_ub=road.y_upper,
        v_min=env.v_min,
    )
    return PlanningScene(
        initial_state=np.array([0.0, 0.0, 12.0, 0.0, 0.0, 0.0]),
        spec=spec,
        lane_centers=road.lane_centers,
    )


def bilevel_config_for(env: PlannerEnvConfig, scene: PlanningScene, batch_size: int | None = None,
                       iterations: int | None = None) -> BiLevelConfig:
    mean = np.concatenate([np.full(env.m_seg, scene.initial_state[1]),
                           np.full(env.m_seg, np.hypot(scene.initial_state[2], scene.initial_state[3]))])
    cov = np.diag(np.concatenate([np.full(env.m_seg, env.sigma_offset**2),
                                  np.full(env.m_seg, env.sigma_speed**2)]))
    return BiLevelConfig(
        batch_size=batch_size if batch_size is not None else env.batch_size,
        constraint_elites=env.constraint_elites,
        elites=env.elites,
        iterations=iterations if iterations is not None else env.iterations,
        eta=env.eta,
        gamma=env.gamma,
        residual_weight=env.residual_weight,
        init_mean=mean,
        init_cov=cov,
    )


def emit_convergence_trace(env: PlannerEnvConfig, seed: int = 0, iterations: int | None = None) -> list[dict]:
    """Per-iteration convergence data on the canonical scene.

    Each record carries the elite-mean upper cost, the covariance trace,
    residual quantiles over the batch, and the lateral envelope (per-time
    min/max y) of the projected sample trajectories: enough to redraw the
    convergence plots externally.
    """
    from .bilevel import LowerLevelSolver  # local import to keep module load light

    scene = canonical_scene(env)
    solver = LowerLevelSolver(
        build_basis_cached(env), env.tracking_weights(),
        layout_for(env), env.projection_config(), env.max_obstacles,
    )
    config = bilevel_config_for(env, scene, iterations=iterations)
    records: list[dict] = []

    def hook(it: int, params, proj, costs, elite_idx):
        n = solver.basis.num_coeffs
        Y = proj.xi[n:].T @ solver.basis.W.T
        records.append(
            {
                "iteration": it,
                "elite_mean_upper_cost": float(costs[elite_idx].mean()),
                "cov_trace": None,  # filled from diagnostics below
                "residual_q10": float(np.quantile(proj.residuals, 0.10)),
                "residual_q50": float(np.quantile(proj.residuals, 0.50)),
                "residual_q90": float(np.quantile(proj.residuals, 0.90)),
                "y_envelope_low": np.min(Y, axis=0).tolist(),
                "y_envelope_high": np.max(Y, axis=0).tolist(),
            }
        )

    result = solve_bilevel(scene, solver, config, np.random.default_rng(seed), trace_hook=hook)
    for rec, stats in zip(records, result.diagnostics):
        rec["cov_trace"] = stats.cov_trace
    return records


def build_basis_cached(env: PlannerEnvConfig):
    from .basis import build_basis

    return build_basis(env.order, env.num_samples, env.horizon, family=env.basis_family)


def layout_for(env: PlannerEnvConfig):
    from .behavior import ParamLayout

    return ParamLayout(m_seg=env.m_seg)


def emit_timing(
    env: PlannerEnvConfig,
    batch_sizes: tuple[int, ...] = (250, 1000),
    iteration_counts: tuple[int, ...] = (2, 5),
    seed: int = 0,
) -> list[dict]:
    """Wall-time table for the bi-level loop, one row per (batch, iterations).

    The factorization counter is sampled around the timed region: reuse of
    the one-shot KKT factorization shows up as zero factorizations during
    the solve itself.
    """
    from .bilevel import LowerLevelSolver

    scene = canonical_scene(env)
    rows: list[dict] = []
    for batch in batch_sizes:
        solver = LowerLevelSolver(
            build_basis_cached(env), env.tracking_weights(),
            layout_for(env), env.projection_config(), env.max_obstacles,
        )
        fact_after_setup = batch_qp.FACTORIZATION_COUNT
        for iters in iteration_counts:
            config = bilevel_config_for(env, scene, batch_size=batch, iterations=iters)
            rng = np.random.default_rng(seed)
            t0 = time.perf_counter()
            solve_bilevel(scene, solver, config, rng)
            wall = time.perf_counter() - t0
            rows.append(
                {
                    "batch": batch,
                    "iterations": iters,
                    "total_s": wall,
                    "per_iteration_s": wall / iters,
                    "factorizations_during_solve": batch_qp.FACTORIZATION_COUNT - fact_after_setup,
                }
            )
    return rows


def replay_to_csv(log_path: str, out_path: str) -> None:
    """Flatten an episode log into one row per vehicle per step for plotting."""
    log = EpisodeLog.read_jsonl(log_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("t,vehicle,x,y,psi,v,accel,steer,collision\n")
        for rec in log.steps:
            t = rec["t"]
            ex, ey, epsi, ev = rec["ego"]
            a, d = rec["ctrl"]
            fh.write(f"{t},ego,{ex!r},{ey!r},{epsi!r},{ev!r},{a!r},{d!r},{int(rec['collision'])}\n")
            for k, (x, y, psi, v) in enumerate(rec["neighbors"]):
                fh.write(f"{t},n{k},{x!r},{y!r},{psi!r},{v!r},,,{int(rec['collision'])}\n")
