"""Deterministic multi-lane highway micro-simulator.

The ego vehicle integrates kinematic bicycle dynamics under externally
supplied (acceleration, steering) commands; neighbor vehicles follow the
intelligent-driver car-following model longitudinally and a
lane-change-incentive rule laterally.  Everything is seeded and stepped
synchronously, so identical configurations replay identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

OBSERVATION_SIZE = 55
NUM_OBSERVED_NEIGHBORS = 10
SENTINEL_RANGE = 1e4


@dataclass
class VehicleState:
    x: float
    y: float
    psi: float
    v: float
    length: float = 5.0
    width: float = 2.0
    lane_index: int = 0
    target_speed: float = 0.0
    target_lane: int = 0
    accel: float = 0.0
    steer: float = 0.0
    lateral_rate: float = 0.0
    cooldown: float = 0.0


@dataclass(frozen=True)
class RoadSpec:
    """Straight multi-lane road; lane i is centered at i * lane_width."""

    lane_count: int
    lane_width: float = 4.0
    length: float = 1500.0
    curvature: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self) -> None:
        if self.lane_count < 2:
            raise ValueError("need at least two lanes")
        if self.lane_width <= 2.5:
            raise ValueError("lane width must exceed vehicle width")

    def lane_center(self, index: int) -> float:
        return index * self.lane_width

    @property
    def lane_centers(self) -> np.ndarray:
        return np.arange(self.lane_count) * self.lane_width

    @property
    def y_lower(self) -> float:
        return -self.lane_width / 2.0

    @property
    def y_upper(self) -> float:
        return (self.lane_count - 1) * self.lane_width + self.lane_width / 2.0

    def lane_of(self, y: float) -> int:
        return int(np.clip(round(y / self.lane_width), 0, self.lane_count - 1))


@dataclass(frozen=True)
class IDMParams:
    v0: float = 12.0
    time_headway: float = 1.5
    s0: float = 2.0
    a_max: float = 1.5
    b_comfort: float = 2.0
    delta: float = 4.0
    b_hard: float = 6.0


@dataclass(frozen=True)
class MOBILParams:
    politeness: float = 0.3
    b_safe: float = 4.0
    a_threshold: float = 0.1
    cooldown: float = 4.0


@dataclass(frozen=True)
class ScenarioConfig:
    road: RoadSpec
    density: float
    vehicle_count: int
    seed: int
    episode_length: int = 150
    dt: float = 0.1
    neighbor_speed: float = 11.0
    ego_speed: float = 10.0
    ego_lane: int = 0
    spawn_base_spacing: float = 40.0
    scenario_id: str = "scenario"

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.density <= 0:
            raise ValueError("dt and density must be positive")

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "lane_count": self.road.lane_count,
            "lane_width": self.road.lane_width,
            "road_length": self.road.length,
            "density": self.density,
            "vehicle_count": self.vehicle_count,
            "seed": self.seed,
            "episode_length": self.episode_length,
            "dt": self.dt,
            "neighbor_speed": self.neighbor_speed,
            "ego_speed": self.ego_speed,
            "ego_lane": self.ego_lane,
            "spawn_base_spacing": self.spawn_base_spacing,
        }

    @staticmethod
    def from_dict(data: dict) -> "ScenarioConfig":
        road = RoadSpec(
            lane_count=int(data["lane_count"]),
            lane_width=float(data.get("lane_width", 4.0)),
            length=float(data.get("road_length", 1500.0)),
        )
        return ScenarioConfig(
            road=road,
            density=float(data["density"]),
            vehicle_count=int(data["vehicle_count"]),
            seed=int(data.get("seed", 0)),
            episode_length=int(data.get("episode_length", 150)),
            dt=float(data.get("dt", 0.1)),
            neighbor_speed=float(data.get("neighbor_speed", 11.0)),
            ego_speed=float(data.get("ego_speed", 10.0)),
            ego_lane=int(data.get("ego_lane", 0)),
            spawn_base_spacing=float(data.get("spawn_base_spacing", 40.0)),
            scenario_id=str(data.get("scenario_id", "scenario")),
        )


@dataclass
class World:
    road: RoadSpec
    ego: VehicleState
    neighbors: list[VehicleState]
    dt: float
    time: float = 0.0
    step_count: int = 0
    collided: bool = False
    collision_step: int | None = None
    lane_departed: bool = False
    idm: IDMParams = field(default_factory=IDMParams)
    mobil: MOBILParams = field(default_factory=MOBILParams)

    def all_vehicles(self) -> list[VehicleState]:
        return [self.ego] + self.neighbors


def spawn_world(config: ScenarioConfig) -> World:
    """Seeded world with neighbors spread over lanes at density-scaled spacing."""
    rng = np.random.default_rng(config.seed)
    road = config.road
    ego = VehicleState(
        x=0.0,
        y=road.lane_center(config.ego_lane),
        psi=0.0,
        v=config.ego_speed,
        lane_index=config.ego_lane,
        target_lane=config.ego_lane,
        target_speed=config.ego_speed,
    )
    spacing = config.spawn_base_spacing / config.density
    lanes = list(range(road.lane_count))
    cursors = {
        lane: (25.0 if lane == config.ego_lane else -15.0) + spacing * 0.5 * rng.uniform(0.0, 1.0)
        for lane in lanes
    }
    neighbors: list[VehicleState] = []
    for i in range(config.vehicle_count):
        lane = lanes[i % len(lanes)]
        x = cursors[lane]
        cursors[lane] = x + spacing * rng.uniform(0.85, 1.15)
        v0 = config.neighbor_speed * (1.0 + 0.15 * rng.uniform(-1.0, 1.0))
        neighbors.append(
            VehicleState(
                x=float(x),
                y=road.lane_center(lane),
                psi=0.0,
                v=float(v0),
                lane_index=lane,
                target_lane=lane,
                target_speed=float(v0),
                cooldown=float(rng.uniform(0.0, 2.0)),
            )
        )
    return World(road=road, ego=ego, neighbors=neighbors, dt=config.dt)


def observe(world: World) -> np.ndarray:
    """Fixed 55-entry observation vector.

    Layout: [ego heading, ego longitudinal speed, ego lateral speed], then
    for each of the 10 closest neighbors (by distance to the ego center)
    [relative longitudinal position, relative lateral position, relative
    longitudinal velocity, relative lateral velocity, relative heading],
    then [offset to the lower road boundary, offset to the upper boundary].
    Missing neighbors hold a sentinel slot (1e4 m ahead, zero relative
    velocity and heading).
    """
    ego = world.ego
    obs = np.zeros(OBSERVATION_SIZE)
    obs[0] = ego.psi
    obs[1] = ego.v * np.cos(ego.psi)
    obs[2] = ego.v * np.sin(ego.psi)

    ranked = sorted(
        world.neighbors,
        key=lambda veh: (veh.x - ego.x) ** 2 + (veh.y - ego.y) ** 2,
    )[:NUM_OBSERVED_NEIGHBORS]
    for slot in range(NUM_OBSERVED_NEIGHBORS):
        base = 3 + 5 * slot
        if slot < len(ranked):
            veh = ranked[slot]
            vx = veh.v * np.cos(veh.psi)
            vy = veh.v * np.sin(veh.psi) + veh.lateral_rate
            obs[base : base + 5] = (
                veh.x - ego.x,
                veh.y - ego.y,
                vx - ego.v * np.cos(ego.psi),
                vy - ego.v * np.sin(ego.psi),
                veh.psi - ego.psi,
            )
        else:
            obs[base : base + 5] = (SENTINEL_RANGE, 0.0, 0.0, 0.0, 0.0)
    obs[53] = ego.y - world.road.y_lower
    obs[54] = world.road.y_upper - ego.y
    return obs


def idm_accel(gap: float, v: float, dv: float, params: IDMParams) -> float:
    """Intelligent-driver acceleration for bumper gap, speed, closing rate."""
    if gap <= 0.0:
        return -params.b_hard
    s_star = params.s0 + v * params.time_headway + v * dv / (2.0 * np.sqrt(params.a_max * params.b_comfort))
    accel = params.a_max * (1.0 - (v / params.v0) ** params.delta - (s_star / gap) ** 2)
    return float(np.clip(accel, -params.b_hard, params.a_max))


def _leader_follower(
    vehicles: list[VehicleState], lane: int, x: float, road: RoadSpec, skip: VehicleState | None = None
) -> tuple[VehicleState | None, VehicleState | None]:
    leader = follower = None
    for veh in vehicles:
        if veh is skip or road.lane_of(veh.y) != lane:
            continue
        if veh.x > x and (leader is None or veh.x < leader.x):
            leader = veh
        elif veh.x <= x and (follower is None or veh.x > follower.x):
            follower = veh
    return leader, follower


def _gap(rear: VehicleState, front: VehicleState) -> float:
    return front.x - rear.x - (front.length + rear.length) / 2.0


def _accel_toward(veh: VehicleState, leader: VehicleState | None, idm: IDMParams) -> float:
    params = replace(idm, v0=veh.target_speed if veh.target_speed > 0 else idm.v0)
    if leader is None:
        return idm_accel(np.inf, veh.v, 0.0, params)
    return idm_accel(_gap(veh, leader), veh.v, veh.v - leader.v, params)


def mobil_lane_change(world: World, veh: VehicleState, target_lane: int) -> bool:
    """Safety-vetoed incentive test for moving ``veh`` to ``target_lane``."""
    road = world.road
    if not (0 <= target_lane < road.lane_count) or target_lane == road.lane_of(veh.y):
        return False
    vehicles = world.all_vehicles()
    idm, mobil = world.idm, world.mobil

    new_leader, new_follower = _leader_follower(vehicles, target_lane, veh.x, road, skip=veh)
    if new_follower is not None:
        params = replace(idm, v0=new_follower.target_speed if new_follower.target_speed > 0 else idm.v0)
        gap_after = _gap(new_follower, veh)
        decel_after = idm_accel(gap_after, new_follower.v, new_follower.v - veh.v, params)
        if decel_after < -mobil.b_safe:
            return False

    cur_lane = road.lane_of(veh.y)
    old_leader, old_follower = _leader_follower(vehicles, cur_lane, veh.x, road, skip=veh)

    self_before = _accel_toward(veh, old_leader, idm)
    self_after = _accel_toward(veh, new_leader, idm)
    own_gain = self_after - self_before

    others_gain = 0.0
    if new_follower is not None:
        before = _accel_toward(new_follower, new_leader, idm)
        after = _accel_toward(new_follower, veh, idm)
        others_gain += after - before
    if old_follower is not None:
        before = _accel_toward(old_follower, veh, idm)
        after = _accel_toward(old_follower, old_leader, idm)
        others_gain += after - before

    return own_gain + mobil.politeness * others_gain > mobil.a_threshold


def _bicycle_deriv(state: np.ndarray, accel: float, steer: float, wheelbase: float) -> np.ndarray:
    x, y, psi, v = state
    return np.array(
        [v * np.cos(psi), v * np.sin(psi), v * np.tan(steer) / wheelbase, accel]
    )


def integrate_bicycle(
    state: np.ndarray, accel: float, steer: float, dt: float, wheelbase: float = 2.5
) -> np.ndarray:
    """One RK4 step of (x, y, psi, v) under constant controls."""
    k1 = _bicycle_deriv(state, accel, steer, wheelbase)
    k2 = _bicycle_deriv(state + 0.5 * dt * k1, accel, steer, wheelbase)
    k3 = _bicycle_deriv(state + 0.5 * dt * k2, accel, steer, wheelbase)
    k4 = _bicycle_deriv(state + dt * k3, accel, steer, wheelbase)
    out = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    out[3] = max(out[3], 0.0)
    return out


def _rect_corners(veh: VehicleState) -> np.ndarray:
    c, s = np.cos(veh.psi), np.sin(veh.psi)
    hx, hy = veh.length / 2.0, veh.width / 2.0
    local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([veh.x, veh.y])


def footprints_overlap(a: VehicleState, b: VehicleState) -> bool:
    """Separating-axis overlap test between two oriented rectangles."""
    ca, cb = _rect_corners(a), _rect_corners(b)
    for psi in (a.psi, b.psi):
        for axis in (np.array([np.cos(psi), np.sin(psi)]), np.array([-np.sin(psi), np.cos(psi)])):
            pa, pb = ca @ axis, cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def step(world: World, ego_accel: float, ego_steer: float, wheelbase: float = 2.5) -> None:
    """Advance the world one tick: ego RK4, neighbors IDM + lane logic."""
    road, dt = world.road, world.dt
    vehicles = world.all_vehicles()

    # Decide all neighbor actions on the frozen snapshot first.
    decisions: list[tuple[float, int]] = []
    decision_period = max(1, int(round(1.0 / dt)))
    for i, veh in enumerate(world.neighbors):
        lane = road.lane_of(veh.y)
        leader, _ = _leader_follower(vehicles, lane, veh.x, road, skip=veh)
        accel = _accel_toward(veh, leader, world.idm)
        target = veh.target_lane
        settled = abs(veh.y - road.lane_center(veh.target_lane)) < 0.2
        if veh.cooldown <= 0.0 and settled and (world.step_count + i) % decision_period == 0:
            for cand in (lane - 1, lane + 1):
                if 0 <= cand < road.lane_count and mobil_lane_change(world, veh, cand):
                    target = cand
                    break
        decisions.append((accel, target))

    ego_state = np.array([world.ego.x, world.ego.y, world.ego.psi, world.ego.v])
    ego_state = integrate_bicycle(ego_state, ego_accel, ego_steer, dt, wheelbase)
    world.ego.x, world.ego.y, world.ego.psi, world.ego.v = ego_state
    world.ego.accel, world.ego.steer = ego_accel, ego_steer
    world.ego.lane_index = road.lane_of(world.ego.y)

    for veh, (accel, target) in zip(world.neighbors, decisions):
        if target != veh.target_lane:
            veh.target_lane = target
            veh.cooldown = world.mobil.cooldown
        veh.cooldown = max(0.0, veh.cooldown - dt)
        veh.v = max(0.0, veh.v + accel * dt)
        veh.x += veh.v * dt
        lateral_err = road.lane_center(veh.target_lane) - veh.y
        veh.lateral_rate = float(np.clip(1.5 * lateral_err, -1.5, 1.5))
        veh.y += veh.lateral_rate * dt
        veh.psi = float(np.arctan2(veh.lateral_rate, max(veh.v, 0.5)))
        veh.lane_index = road.lane_of(veh.y)
        veh.accel = accel

    world.time += dt
    world.step_count += 1

    for veh in world.neighbors:
        if footprints_overlap(world.ego, veh):
            world.collided = True
            if world.collision_step is None:
                world.collision_step = world.step_count
            break
    ego_half = world.ego.width / 2.0
    if world.ego.y - ego_half < road.y_lower or world.ego.y + ego_half > road.y_upper:
        world.lane_departed = True


@dataclass
class EpisodeLog:
    """Per-step record of one episode plus outcome flags."""

    meta: dict
    steps: list[dict] = field(default_factory=list)
    plan_records: list[dict] = field(default_factory=list)
    collided: bool = False
    collision_step: int | None = None
    lane_departed: bool = False
    failed: bool = False
    failure_reason: str = ""

    def ego_speeds(self) -> np.ndarray:
        return np.array([rec["ego"][3] for rec in self.steps])

    def mean_speed(self) -> float:
        speeds = self.ego_speeds()
        return float(speeds.mean()) if speeds.size else 0.0

    def solve_times(self) -> list[float]:
        return [rec["solve_time"] for rec in self.plan_records if "solve_time" in rec]

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "type": "meta",
                **self.meta,
                "collided": self.collided,
                "collision_step": self.collision_step,
                "lane_departed": self.lane_departed,
                "failed": self.failed,
                "failure_reason": self.failure_reason,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.plan_records:
                fh.write(json.dumps({"type": "plan", **rec}, sort_keys=True) + "\n")
            for rec in self.steps:
                fh.write(json.dumps({"type": "step", **rec}, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path: str) -> "EpisodeLog":
        meta: dict = {}
        steps: list[dict] = []
        plans: list[dict] = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("type")
                if kind == "meta":
                    meta = rec
                elif kind == "step":
                    steps.append(rec)
                elif kind == "plan":
                    plans.append(rec)
        log = EpisodeLog(meta=meta, steps=steps, plan_records=plans)
        log.collided = bool(meta.pop("collided", False))
        log.collision_step = meta.pop("collision_step", None)
        log.lane_departed = bool(meta.pop("lane_departed", False))
        log.failed = bool(meta.pop("failed", False))
        log.failure_reason = str(meta.pop("failure_reason", ""))
        return log


def _snapshot(world: World) -> dict:
    return {
        "t": round(world.time, 6),
        "ego": [world.ego.x, world.ego.y, world.ego.psi, world.ego.v],
        "ctrl": [world.ego.accel, world.ego.steer],
        "neighbors": [[v.x, v.y, v.psi, v.v] for v in world.neighbors],
        "collision": world.collided,
    }


def run_episode(
    scenario: ScenarioConfig,
    planner,
    replan_stride: int = 5,
    road_end_margin: float = 60.0,
) -> EpisodeLog:
    """Closed-loop episode: replan every ``replan_stride`` steps, execute open loop.

    The planner must expose ``reset()`` and ``plan_cycle(world) ->
    (accels, steers, info)`` with at least ``replan_stride`` control
    entries.  Planner exceptions mark the episode failed instead of
    propagating, so a sweep continues past a broken cycle.
    """
    world = spawn_world(scenario)
    planner.reset()
    log = EpisodeLog(
        meta={"scenario": scenario.to_dict(), "planner": getattr(planner, "name", "unknown"),
              "replan_stride": replan_stride}
    )
    accels: np.ndarray | None = None
    steers: np.ndarray | None = None
    offset = 0

    for k in range(scenario.episode_length):
        if k % replan_stride == 0:
            try:
                accels, steers, info = planner.plan_cycle(world)
            except Exception as exc:  # noqa: BLE001 - planner failures end the episode, not the sweep
                log.failed = True
                log.failure_reason = f"{type(exc).__name__}: {exc}"
                break
            offset = 0
            log.plan_records.append({"step": k, **info})
        assert accels is not None and steers is not None
        idx = min(offset, len(accels) - 1)
        step(world, float(accels[idx]), float(steers[idx]))
        offset += 1
        log.steps.append(_snapshot(world))
        if world.collided:
            log.collided = True
            log.collision_step = world.collision_step
            break
        if world.ego.x >= scenario.road.length - road_end_margin:
            break
    log.lane_departed = world.lane_departed
    return log
