"""Batched projection onto collision and kinematic constraints.

Unconstrained QP solutions are projected onto the feasible set by
alternating minimization: norm-type constraints are rewritten with polar
auxiliaries (angle alpha, magnitude d) so that each block update is closed
form, lane inequalities get nonnegative slacks, and an augmented
Lagrangian multiplier drives the penalty residuals to zero.

Each iteration solves an equality-constrained QP over the coefficients
with a penalty-augmented quadratic whose KKT system is factorized once
(through the batch-qp machinery) and reused across iterations and batch
columns.  The reported residual is always the direct constraint
evaluation from :mod:`bilevel_drive.constraints`, never the internal
penalty residues.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .basis import PolynomialBasis, TrajectoryCoeffs
from .batch_qp import (
    NumericalFailure,
    QPRightHandSideBatch,
    QPSolutionBatch,
    QPStructure,
    solve_batch,
    structure_from_matrices,
)
from .constraints import ConstraintSpec, batch_residuals

_SIN_FLOOR = 1e-8
_KAPPA_FLOOR = 1e-12


@dataclass(frozen=True)
class ProjectionConfig:
    rho: float = 1.0
    max_iters: int = 100
    tol: float = 1e-3

    def __post_init__(self) -> None:
        if self.rho <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError("need rho > 0, max_iters >= 1, tol > 0")


@dataclass(frozen=True)
class ProjectionState:
    """Polar auxiliaries, slacks, and multipliers of one AM sweep (batched)."""

    alpha_o: np.ndarray
    d_o: np.ndarray
    alpha_v: np.ndarray
    d_v: np.ndarray
    alpha_a: np.ndarray
    d_a: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    rho: float


@dataclass(frozen=True)
class ProjectionReport:
    """Outcome of projecting one sample."""

    coeffs: TrajectoryCoeffs
    residual: float
    residual_history: np.ndarray
    iterations_used: int


@dataclass(frozen=True)
class ProjectionBatchResult:
    """Column-wise outcome of projecting a batch; reports() unpacks it."""

    xi: np.ndarray
    residuals: np.ndarray
    residual_history: np.ndarray
    iterations_used: int
    clip_conflicts: int

    @property
    def batch_size(self) -> int:
        return self.xi.shape[1]

    def reports(self) -> list[ProjectionReport]:
        return [
            ProjectionReport(
                coeffs=TrajectoryCoeffs.from_stacked(self.xi[:, j]),
                residual=float(self.residuals[j]),
                residual_history=self.residual_history[:, j].copy(),
                iterations_used=self.iterations_used,
            )
            for j in range(self.batch_size)
        ]


def polar_decompose(
    xdot: np.ndarray,
    ydot: np.ndarray,
    xddot: np.ndarray,
    yddot: np.ndarray,
    x: np.ndarray | None = None,
    y: np.ndarray | None = None,
    obstacles_x: np.ndarray | None = None,
    obstacles_y: np.ndarray | None = None,
    ellipse: tuple[float, float] = (1.0, 1.0),
):
    """Closed-form polar split of the stacked velocity/acceleration/clearance maps.

    Returns (alpha_o, alpha_v, alpha_a, d_o, d_v, d_a); the obstacle pair is
    None when no obstacle data is given.  Before any clipping the polar pair
    reconstructs its observation exactly: xdot = d_v cos(alpha_v),
    x - x_o = a d_o cos(alpha_o), etc.  atan2(0, 0) follows the numpy
    convention of 0, pairing with d = 0.
    """
    alpha_v = np.arctan2(ydot, xdot)
    d_v = np.hypot(xdot, ydot)
    alpha_a = np.arctan2(yddot, xddot)
    d_a = np.hypot(xddot, yddot)

    alpha_o = d_o = None
    if obstacles_x is not None:
        if x is None or y is None:
            raise ValueError("positions are required for the obstacle split")
        a, b = ellipse
        wc = np.expand_dims(x, -2) - obstacles_x
        ws = np.expand_dims(y, -2) - obstacles_y
        alpha_o = np.arctan2(a * ws, b * wc)
        cos_o, sin_o = np.cos(alpha_o), np.sin(alpha_o)
        denom = (a * cos_o) ** 2 + (b * sin_o) ** 2
        d_o = np.where(denom > 0.0, (a * wc * cos_o + b * ws * sin_o) / np.where(denom > 0.0, denom, 1.0), 0.0)
    return alpha_o, alpha_v, alpha_a, d_o, d_v, d_a


def _clip_magnitudes(
    alpha_v: np.ndarray,
    d_v_raw: np.ndarray,
    alpha_a: np.ndarray,
    d_a_raw: np.ndarray,
    d_o_raw: np.ndarray | None,
    d_a_prev: np.ndarray,
    kappa_abs: np.ndarray,
    spec: ConstraintSpec,
):
    """Clip the polar magnitudes into their coupled feasible intervals.

    The speed window folds in the curvature lower bound
    sqrt(d_a |sin(alpha_a - alpha_v)| / kappa_max) and the centripetal upper
    bound sqrt(c_max / (|kappa| cos^2 alpha_v)); the acceleration ceiling is
    min(a_max, d_v^2 kappa_max / |sin(alpha_a - alpha_v)|).  Where the speed
    window is empty the magnitude is clamped to the upper bound and the
    conflict is counted (the residual keeps the record honest).
    """
    d_o = None if d_o_raw is None else np.maximum(d_o_raw, 1.0)

    sin_gap = np.abs(np.sin(alpha_a - alpha_v))
    v_lo = np.maximum(spec.v_min, np.sqrt(d_a_prev * sin_gap / spec.kappa_max))
    cent = kappa_abs * np.cos(alpha_v) ** 2
    v_hi = np.where(cent > _KAPPA_FLOOR, np.sqrt(spec.c_max / np.maximum(cent, _KAPPA_FLOOR)), spec.v_max)
    v_hi = np.minimum(spec.v_max, v_hi)
    conflicts = int(np.count_nonzero(v_lo > v_hi))
    d_v = np.clip(d_v_raw, np.minimum(v_lo, v_hi), v_hi)

    a_hi = np.minimum(spec.a_max, d_v**2 * spec.kappa_max / np.maximum(sin_gap, _SIN_FLOOR))
    d_a = np.clip(d_a_raw, 0.0, a_hi)
    return d_o, d_v, d_a, conflicts


def clip_magnitudes(state: ProjectionState, spec: ConstraintSpec, kappa_abs: np.ndarray | None = None) -> ProjectionState:
    """Clip a :class:`ProjectionState` in place of the raw polar magnitudes."""
    if kappa_abs is None:
        kappa_abs = np.zeros_like(state.d_v)
    d_o, d_v, d_a, _ = _clip_magnitudes(
        state.alpha_v, state.d_v, state.alpha_a, state.d_a, state.d_o, state.d_a, kappa_abs, spec
    )
    return replace(state, d_o=d_o, d_v=d_v, d_a=d_a)


class ProjectionOperator:
    """Reusable batched projector for a fixed basis / obstacle-count layout.

    Constructing the operator assembles and factorizes the penalty-augmented
    KKT system exactly once; projections of any batch size then reuse it.
    """

    def __init__(
        self,
        basis: PolynomialBasis,
        qp: QPStructure,
        num_obstacles: int,
        config: ProjectionConfig = ProjectionConfig(),
    ):
        if num_obstacles < 0:
            raise ValueError("num_obstacles must be nonnegative")
        self.basis = basis
        self.qp = qp
        self.num_obstacles = num_obstacles
        self.config = config

        W, Wd, Wdd = basis.W, basis.Wdot, basis.Wddot
        n = basis.num_coeffs
        rho = config.rho
        # F^T F collapses to per-block Gram matrices: the obstacle block
        # repeats W once per neighbor, the lane block G = [W; -W] doubles W.
        gram = num_obstacles * (W.T @ W) + Wd.T @ Wd + Wdd.T @ Wdd
        Qx = np.eye(n) + rho * gram
        Qy = Qx + rho * 2.0 * (W.T @ W)
        Q = np.zeros((2 * n, 2 * n))
        Q[:n, :n] = Qx
        Q[n:, n:] = Qy
        self.aug = structure_from_matrices(Q, qp.A_eq)

    def project(
        self,
        xi_bar: np.ndarray,
        b_batch: np.ndarray,
        spec: ConstraintSpec,
    ) -> ProjectionBatchResult:
        """Project a (2n, batch) coefficient block onto the constraint set."""
        basis, cfg = self.basis, self.config
        n, m = basis.num_coeffs, basis.num_samples
        if spec.num_samples != m:
            raise ValueError("constraint spec and basis disagree on the time grid")
        if spec.num_obstacles != self.num_obstacles:
            raise ValueError(
                f"operator was built for {self.num_obstacles} obstacles, spec has {spec.num_obstacles}"
            )
        xi_bar = np.atleast_2d(np.asarray(xi_bar, dtype=float))
        if xi_bar.shape[0] != 2 * n:
            raise ValueError(f"xi_bar must stack 2*{n} coefficient rows")
        n_batch = xi_bar.shape[1]
        W, Wd, Wdd = basis.W, basis.Wdot, basis.Wddot
        rho = cfg.rho
        a, b = spec.ellipse_a, spec.ellipse_b
        ox, oy = spec.obstacles_x, spec.obstacles_y
        has_obs = self.num_obstacles > 0

        cx_bar, cy_bar = xi_bar[:n].T, xi_bar[n:].T
        CX, CY = cx_bar.copy(), cy_bar.copy()

        def traj(CX, CY):
            return (CX @ W.T, CY @ W.T, CX @ Wd.T, CY @ Wd.T, CX @ Wdd.T, CY @ Wdd.T)

        X, Y, XD, YD, XDD, YDD = traj(CX, CY)

        alpha_o, alpha_v, alpha_a, d_o, d_v, d_a = polar_decompose(
            XD, YD, XDD, YDD, X, Y, ox if has_obs else None, oy if has_obs else None, (a, b)
        )
        kappa_abs = np.abs(spec.kappa_at(X))
        # Seed the coupled clips with an acceleration magnitude already inside
        # [0, a_max]; the raw value would inflate the curvature speed floor.
        d_a_seed = np.clip(d_a, 0.0, spec.a_max)
        d_o, d_v, d_a, conflicts = _clip_magnitudes(
            alpha_v, d_v, alpha_a, d_a, d_o, d_a_seed, kappa_abs, spec
        )

        lam_x = np.zeros((n_batch, n))
        lam_y = np.zeros((n_batch, n))
        # Lane rows come in [upper; lower] pairs: G c_y = [y; -y] <= e.  The
        # slack starts at max(0, e - G xi) so interior points feel no pull.
        e_lane = np.concatenate([np.full(m, spec.y_ub), np.full(m, -spec.y_lb)])
        s = np.maximum(0.0, e_lane[None, :] - np.concatenate([Y, -Y], axis=1))

        history = np.empty((cfg.max_iters, n_batch))
        iterations = 0
        residuals = np.full(n_batch, np.inf)

        for it in range(cfg.max_iters):
            iterations = it + 1
            cos_v, sin_v = np.cos(alpha_v), np.sin(alpha_v)
            cos_a, sin_a = np.cos(alpha_a), np.sin(alpha_a)

            lin_x = cx_bar + lam_x + rho * ((d_v * cos_v) @ Wd + (d_a * cos_a) @ Wdd)
            lin_y = cy_bar + lam_y + rho * ((d_v * sin_v) @ Wd + (d_a * sin_a) @ Wdd)
            if has_obs:
                hx = ox[None, :, :] + a * d_o * np.cos(alpha_o)
                hy = oy[None, :, :] + b * d_o * np.sin(alpha_o)
                lin_x += rho * (hx.sum(axis=1) @ W)
                lin_y += rho * (hy.sum(axis=1) @ W)
            lane_target = e_lane[None, :] - s
            lin_y += rho * ((lane_target[:, :m] - lane_target[:, m:]) @ W)

            rhs = QPRightHandSideBatch(
                q_batch=-np.concatenate([lin_x, lin_y], axis=1).T, b_batch=b_batch
            )
            sol = solve_batch(self.aug, rhs)
            if not np.isfinite(sol.xi).all():
                raise NumericalFailure("projection iterate is not finite")
            CX, CY = sol.xi[:n].T, sol.xi[n:].T

            X_prev = X
            X, Y, XD, YD, XDD, YDD = traj(CX, CY)

            alpha_o, alpha_v, alpha_a, d_o_raw, d_v_raw, d_a_raw = polar_decompose(
                XD, YD, XDD, YDD, X, Y, ox if has_obs else None, oy if has_obs else None, (a, b)
            )
            # Road curvature and the previous acceleration magnitude are
            # frozen from the last iterate when clipping.
            kappa_abs = np.abs(spec.kappa_at(X_prev))
            d_o, d_v, d_a, step_conflicts = _clip_magnitudes(
                alpha_v, d_v_raw, alpha_a, d_a_raw, d_o_raw, d_a, kappa_abs, spec
            )
            conflicts += step_conflicts

            lane_vals = np.concatenate([Y, -Y], axis=1)
            s = np.maximum(0.0, e_lane[None, :] - lane_vals)
            res_lane = lane_vals - e_lane[None, :] + s

            res_v_x = XD - d_v * np.cos(alpha_v)
            res_v_y = YD - d_v * np.sin(alpha_v)
            res_a_x = XDD - d_a * np.cos(alpha_a)
            res_a_y = YDD - d_a * np.sin(alpha_a)
            corr_x = res_v_x @ Wd + res_a_x @ Wdd
            corr_y = res_v_y @ Wd + res_a_y @ Wdd
            if has_obs:
                res_o_x = (np.expand_dims(X, 1) - ox) - a * d_o * np.cos(alpha_o)
                res_o_y = (np.expand_dims(Y, 1) - oy) - b * d_o * np.sin(alpha_o)
                corr_x += res_o_x.sum(axis=1) @ W
                corr_y += res_o_y.sum(axis=1) @ W
            corr_y += (res_lane[:, :m] - res_lane[:, m:]) @ W
            lam_x = lam_x - 0.5 * rho * corr_x
            lam_y = lam_y - 0.5 * rho * corr_y

            residuals = batch_residuals(spec, X, Y, XD, YD, XDD, YDD)
            history[it] = residuals
            if residuals.max() <= cfg.tol:
                break

        xi_out = np.concatenate([CX, CY], axis=1).T
        return ProjectionBatchResult(
            xi=xi_out,
            residuals=residuals,
            residual_history=history[:iterations].copy(),
            iterations_used=iterations,
            clip_conflicts=conflicts,
        )


def project_batch(
    solution: QPSolutionBatch,
    spec: ConstraintSpec,
    qp: QPStructure,
    config: ProjectionConfig,
    b_batch: np.ndarray,
) -> list[ProjectionReport]:
    """One-shot surface over :class:`ProjectionOperator` (factorizes anew)."""
    operator = ProjectionOperator(qp.basis, qp, spec.num_obstacles, config) if qp.basis else None
    if operator is None:
        raise ValueError("qp structure lacks basis metadata; build it with build_qp_structure")
    return operator.project(solution.xi, b_batch, spec).reports()
