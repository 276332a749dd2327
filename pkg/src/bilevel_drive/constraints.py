"""Inequality constraint specification and direct violation evaluation.

The evaluator here is deliberately independent of the alternating
minimization internals: it computes each constraint in its original form
(ellipse clearance, speed/acceleration norms, curvature, centripetal
acceleration, lane bounds) and sums the positive violations.  Projection
reports and elite ranking both use this directly evaluated residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SPEED_EPS = 1e-6


@dataclass(frozen=True)
class ConstraintSpec:
    """Constraint data shared by every sample of one planning cycle.

    Obstacle trajectories are sampled on the planner time grid, one row per
    neighbor.  ``ellipse_a``/``ellipse_b`` are the semi-axes of the
    combined footprint ellipse used in the clearance constraint
    ``((x - x_o)/a)^2 + ((y - y_o)/b)^2 >= 1``.  ``road_curvature`` is an
    optional tabulated centre-line curvature (x values, kappa values);
    straight roads leave it None (kappa = 0 everywhere).
    """

    obstacles_x: np.ndarray
    obstacles_y: np.ndarray
    ellipse_a: float
    ellipse_b: float
    v_max: float
    a_max: float
    kappa_max: float
    c_max: float
    y_lb: float
    y_ub: float
    v_min: float = 0.0
    road_curvature: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        ox = np.atleast_2d(np.asarray(self.obstacles_x, dtype=float))
        oy = np.atleast_2d(np.asarray(self.obstacles_y, dtype=float))
        if ox.shape != oy.shape:
            raise ValueError(f"obstacle arrays disagree: {ox.shape} vs {oy.shape}")
        object.__setattr__(self, "obstacles_x", ox)
        object.__setattr__(self, "obstacles_y", oy)
        if self.v_min >= self.v_max:
            raise ValueError(f"need v_min < v_max, got [{self.v_min}, {self.v_max}]")
        for name in ("ellipse_a", "ellipse_b", "a_max", "kappa_max", "c_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.y_lb >= self.y_ub:
            raise ValueError("lane bounds must satisfy y_lb < y_ub")

    @property
    def num_obstacles(self) -> int:
        return self.obstacles_x.shape[0]

    @property
    def num_samples(self) -> int:
        return self.obstacles_x.shape[1]

    def kappa_at(self, x: np.ndarray) -> np.ndarray:
        """Centre-line curvature at longitudinal positions x."""
        if self.road_curvature is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        xs, ks = self.road_curvature
        return np.interp(x, xs, ks)


@dataclass(frozen=True)
class PlanningScene:
    """Everything one planning cycle needs: ego state and constraints.

    ``initial_state`` stacks (x, y, xdot, ydot, xddot, yddot) at the
    replanning instant.
    """

    initial_state: np.ndarray
    spec: ConstraintSpec
    lane_centers: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self) -> None:
        state = np.asarray(self.initial_state, dtype=float)
        if state.shape != (6,):
            raise ValueError("initial_state must stack (x, y, xdot, ydot, xddot, yddot)")
        object.__setattr__(self, "initial_state", state)
        object.__setattr__(self, "lane_centers", np.asarray(self.lane_centers, dtype=float))


def violation_breakdown(
    spec: ConstraintSpec,
    x: np.ndarray,
    y: np.ndarray,
    xdot: np.ndarray,
    ydot: np.ndarray,
    xddot: np.ndarray,
    yddot: np.ndarray,
) -> dict[str, np.ndarray]:
    """Per-constraint positive violations, batched.

    Inputs are (batch, m) arrays (or (m,), promoted).  Each entry of the
    result is a (batch,) array of summed violations in the constraint's
    natural units.
    """
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    xdot, ydot = np.atleast_2d(xdot), np.atleast_2d(ydot)
    xddot, yddot = np.atleast_2d(xddot), np.atleast_2d(yddot)

    out: dict[str, np.ndarray] = {}

    if spec.num_obstacles:
        dx = (x[:, None, :] - spec.obstacles_x[None, :, :]) / spec.ellipse_a
        dy = (y[:, None, :] - spec.obstacles_y[None, :, :]) / spec.ellipse_b
        clearance = 1.0 - dx**2 - dy**2
        out["collision"] = np.maximum(clearance, 0.0).sum(axis=(1, 2))
    else:
        out["collision"] = np.zeros(x.shape[0])

    speed = np.hypot(xdot, ydot)
    out["velocity"] = (
        np.maximum(speed - spec.v_max, 0.0) + np.maximum(spec.v_min - speed, 0.0)
    ).sum(axis=1)

    accel = np.hypot(xddot, yddot)
    out["acceleration"] = np.maximum(accel - spec.a_max, 0.0).sum(axis=1)

    kappa = np.abs(yddot * xdot - xddot * ydot) / np.maximum(speed, _SPEED_EPS) ** 3
    out["curvature"] = np.maximum(kappa - spec.kappa_max, 0.0).sum(axis=1)

    road_kappa = spec.kappa_at(x)
    out["centripetal"] = np.maximum(xdot**2 * np.abs(road_kappa) - spec.c_max, 0.0).sum(axis=1)

    out["lane"] = (np.maximum(y - spec.y_ub, 0.0) + np.maximum(spec.y_lb - y, 0.0)).sum(axis=1)
    return out


def batch_residuals(
    spec: ConstraintSpec,
    x: np.ndarray,
    y: np.ndarray,
    xdot: np.ndarray,
    ydot: np.ndarray,
    xddot: np.ndarray,
    yddot: np.ndarray,
) -> np.ndarray:
    """Total residual per batch sample: sum of all positive violations."""
    parts = violation_breakdown(spec, x, y, xdot, ydot, xddot, yddot)
    return sum(parts.values())
