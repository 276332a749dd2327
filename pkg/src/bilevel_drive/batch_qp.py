"""One-shot batched solution of equality-constrained trajectory QPs.

Every behavior sample shares the same quadratic cost and equality
constraint matrix; only the linear cost q(p) and the right-hand side b(p)
vary.  The bordered KKT matrix

    [[Q, A_eq^T],
     [A_eq, 0]]

is therefore factorized once and reused across the whole batch, so a batch
solve is a single factorized-matrix application to the stacked right-hand
side block [-q(p_j); b(p_j)].

Cost convention: minimize 0.5 * xi^T Q xi + q^T xi over xi = (c_x, c_y),
subject to A_eq xi = b.  Stationarity puts -q on the KKT right-hand side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .basis import PolynomialBasis
from .behavior import BehaviorParams, ParamLayout, segment_matrix

# Counts KKT factorizations process-wide; lets tests and the timing harness
# verify that structures are factorized once and reused across batches.
FACTORIZATION_COUNT = 0


def _count_factorization() -> None:
    global FACTORIZATION_COUNT
    FACTORIZATION_COUNT += 1


class StructureError(ValueError):
    """The assembled QP violates a rank or shape requirement."""


class NumericalFailure(RuntimeError):
    """A solve produced residuals or iterates outside numerical tolerance."""


@dataclass(frozen=True)
class TrackingWeights:
    """Gains and relative weights of the smoothness/tracking cost terms.

    The offset term penalizes (yddot - k_p (y - y_d) - k_v ydot)^2 and the
    speed term (xddot - k_p (xdot - v_d))^2; k_v defaults to the critically
    damped 2 sqrt(k_p).
    """

    k_p: float = 20.0
    k_v: float = 2.0 * math.sqrt(20.0)
    w_smooth: float = 1.0
    w_offset: float = 20.0
    w_speed: float = 20.0


@dataclass(frozen=True)
class QPStructure:
    """Factorized KKT system shared by a whole batch of behavior samples."""

    Q: np.ndarray
    A_eq: np.ndarray
    kkt: np.ndarray
    lu: tuple = field(repr=False)
    # RHS-building metadata; None for structures built from raw matrices.
    basis: PolynomialBasis | None = None
    weights: TrackingWeights | None = None
    layout: ParamLayout | None = None
    q_map_x: np.ndarray | None = field(default=None, repr=False)
    q_map_y: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_vars(self) -> int:
        return self.Q.shape[0]

    @property
    def num_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def with_goal(self) -> bool:
        return self.layout is not None and self.layout.with_goal


@dataclass(frozen=True)
class QPRightHandSideBatch:
    """Per-sample linear costs and equality targets, stored column-wise."""

    q_batch: np.ndarray
    b_batch: np.ndarray

    def __post_init__(self) -> None:
        if self.q_batch.ndim != 2 or self.b_batch.ndim != 2:
            raise ValueError("q_batch and b_batch must be 2-D (vars x batch)")
        if self.q_batch.shape[1] != self.b_batch.shape[1]:
            raise ValueError("q_batch and b_batch disagree on batch size")
        if self.q_batch.shape[1] < 1:
            raise ValueError("batch must hold at least one sample")
        if not (np.isfinite(self.q_batch).all() and np.isfinite(self.b_batch).all()):
            raise ValueError("right-hand sides must be finite")

    @property
    def batch_size(self) -> int:
        return self.q_batch.shape[1]


@dataclass(frozen=True)
class QPSolutionBatch:
    """Primal coefficients and equality duals, one column per sample."""

    xi: np.ndarray
    mu: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.xi.shape[1]


def _factorize_kkt(Q: np.ndarray, A_eq: np.ndarray) -> tuple[np.ndarray, tuple]:
    n, neq = Q.shape[0], A_eq.shape[0]
    if A_eq.shape[1] != n:
        raise StructureError(f"A_eq has {A_eq.shape[1]} columns for {n} variables")
    if neq and np.linalg.matrix_rank(A_eq) < neq:
        raise StructureError("A_eq is rank deficient")
    kkt = np.zeros((n + neq, n + neq))
    kkt[:n, :n] = Q
    kkt[:n, n:] = A_eq.T
    kkt[n:, :n] = A_eq
    lu = lu_factor(kkt)
    _count_factorization()
    # Cheap nonsingularity probe: a singular KKT leaves garbage in the solve.
    probe = lu_solve(lu, np.ones(n + neq))
    if not np.isfinite(probe).all():
        raise StructureError("KKT matrix is singular")
    return kkt, lu


def structure_from_matrices(Q: np.ndarray, A_eq: np.ndarray) -> QPStructure:
    """Factorize an explicitly assembled (Q, A_eq) pair."""
    Q = np.asarray(Q, dtype=float)
    A_eq = np.asarray(A_eq, dtype=float)
    kkt, lu = _factorize_kkt(Q, A_eq)
    return QPStructure(Q=Q, A_eq=A_eq, kkt=kkt, lu=lu)


def build_qp_structure(
    basis: PolynomialBasis,
    weights: TrackingWeights,
    layout: ParamLayout,
) -> QPStructure:
    """Assemble and factorize the behavior-tracking QP structure.

    The quadratic part is independent of the behavior sample: smoothness
    plus tracking-residual quadratics per axis.  Equality rows pin the
    initial position/velocity/acceleration of both axes; with a goal layout
    they additionally pin x(T), y(T) and ydot(T).
    """
    W, Wd, Wdd = basis.W, basis.Wdot, basis.Wddot
    n = basis.num_coeffs
    S = segment_matrix(basis.num_samples, layout.m_seg)

    A_speed = Wdd - weights.k_p * Wd
    A_offset = Wdd - weights.k_p * W - weights.k_v * Wd
    Qx = weights.w_smooth * (Wdd.T @ Wdd) + weights.w_speed * (A_speed.T @ A_speed)
    Qy = weights.w_smooth * (Wdd.T @ Wdd) + weights.w_offset * (A_offset.T @ A_offset)
    Q = np.zeros((2 * n, 2 * n))
    Q[:n, :n] = Qx
    Q[n:, n:] = Qy

    # Tracking residual r = A c + k_p * (S @ setpoints), so the linear cost
    # is q = w * k_p * A^T S @ setpoints: precompute the setpoint-to-q maps.
    q_map_x = weights.w_speed * weights.k_p * (A_speed.T @ S)
    q_map_y = weights.w_offset * weights.k_p * (A_offset.T @ S)

    rows = [
        np.concatenate([W[0], np.zeros(n)]),
        np.concatenate([np.zeros(n), W[0]]),
        np.concatenate([Wd[0], np.zeros(n)]),
        np.concatenate([np.zeros(n), Wd[0]]),
        np.concatenate([Wdd[0], np.zeros(n)]),
        np.concatenate([np.zeros(n), Wdd[0]]),
    ]
    if layout.with_goal:
        rows.append(np.concatenate([W[-1], np.zeros(n)]))
        rows.append(np.concatenate([np.zeros(n), W[-1]]))
        rows.append(np.concatenate([np.zeros(n), Wd[-1]]))
    A_eq = np.vstack(rows)

    kkt, lu = _factorize_kkt(Q, A_eq)
    return QPStructure(
        Q=Q,
        A_eq=A_eq,
        kkt=kkt,
        lu=lu,
        basis=basis,
        weights=weights,
        layout=layout,
        q_map_x=q_map_x,
        q_map_y=q_map_y,
    )


def build_rhs_batch(
    structure: QPStructure,
    param_batch: np.ndarray,
    initial_state: np.ndarray,
) -> QPRightHandSideBatch:
    """Build (q, b) columns for a batch of flattened behavior vectors.

    ``initial_state`` stacks (x, y, xdot, ydot, xddot, yddot) at t0 and is
    shared by the batch; goal entries of each sample land in b.
    """
    if structure.layout is None or structure.q_map_x is None or structure.q_map_y is None:
        raise StructureError("structure was built from raw matrices and has no RHS metadata")
    layout = structure.layout
    param_batch = np.atleast_2d(np.asarray(param_batch, dtype=float))
    if param_batch.shape[1] != layout.dim:
        raise ValueError(f"behavior vectors have dim {param_batch.shape[1]}, layout wants {layout.dim}")
    initial_state = np.asarray(initial_state, dtype=float)
    if initial_state.shape != (6,):
        raise ValueError("initial_state must stack (x, y, xdot, ydot, xddot, yddot)")

    m_seg = layout.m_seg
    y_d = param_batch[:, :m_seg]
    v_d = param_batch[:, m_seg : 2 * m_seg]
    q_batch = np.concatenate([structure.q_map_x @ v_d.T, structure.q_map_y @ y_d.T], axis=0)

    n_batch = param_batch.shape[0]
    b_batch = np.repeat(initial_state[:, None], n_batch, axis=1)
    if layout.with_goal:
        goals = param_batch[:, 2 * m_seg :]
        b_batch = np.vstack([b_batch, goals[:, 0], goals[:, 1], np.zeros(n_batch)])
    return QPRightHandSideBatch(q_batch=q_batch, b_batch=b_batch)


def assemble_qp(
    basis: PolynomialBasis,
    weights: TrackingWeights,
    params: BehaviorParams,
    initial_state: np.ndarray,
) -> tuple[QPStructure, np.ndarray, np.ndarray]:
    """Assemble the QP for one behavior sample: structure plus (q, b).

    Terminal conditions (x(T), y(T), ydot(T)) = (x_f, y_f, 0) are added
    when the sample carries a goal.
    """
    structure = build_qp_structure(basis, weights, params.layout())
    rhs = build_rhs_batch(structure, params.to_vector()[None, :], initial_state)
    return structure, rhs.q_batch[:, 0], rhs.b_batch[:, 0]


def solve_batch(structure: QPStructure, rhs: QPRightHandSideBatch) -> QPSolutionBatch:
    """Solve the whole batch with one application of the factorized KKT.

    Checks the per-sample KKT residual against 1e-8 * (1 + ||rhs||) and
    raises :class:`NumericalFailure` if any column fails.
    """
    n, neq = structure.num_vars, structure.num_eq
    if rhs.q_batch.shape[0] != n or rhs.b_batch.shape[0] != neq:
        raise ValueError(
            f"rhs dims ({rhs.q_batch.shape[0]}, {rhs.b_batch.shape[0]}) do not match "
            f"structure ({n}, {neq})"
        )
    stacked = np.vstack([-rhs.q_batch, rhs.b_batch])
    sol = lu_solve(structure.lu, stacked)
    residual = np.abs(structure.kkt @ sol - stacked).max(axis=0)
    scale = 1.0 + np.abs(stacked).max(axis=0)
    bad = residual > 1e-8 * scale
    if bad.any():
        worst = int(np.argmax(residual / scale))
        raise NumericalFailure(
            f"KKT residual {residual[worst]:.3g} exceeds tolerance for sample {worst}"
        )
    return QPSolutionBatch(xi=sol[:n], mu=sol[n:])
