"""Polynomial trajectory parametrization and differential-flatness helpers.

Planar trajectories are represented as a pair of polynomials sampled on a
fixed time grid, ``x(t_i) = W c_x`` and ``y(t_i) = W c_y``, with ``Wdot``
and ``Wddot`` holding the exact first and second time derivatives of the
basis rows.  The basis is monomial in normalized time ``tau = t / T``,
which keeps the normal equations well conditioned at order 10.

Heading, speed, curvature, steering, and longitudinal acceleration are
recovered algebraically from the position derivatives of the kinematic
bicycle model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SpeedSingularity(ValueError):
    """Raised when the flatness map hits a near-zero speed sample."""


@dataclass(frozen=True)
class PolynomialBasis:
    """Sampled basis matrices for one planning horizon.

    ``W`` is ``(m, order + 1)`` with row i evaluating the basis functions at
    ``tau = t_i / horizon``; ``Wdot`` and ``Wddot`` carry the 1/s and 1/s^2
    scaling of the chain rule.  Two families are available: plain monomials
    (the default) and the Bernstein basis, whose coefficients are
    position-scale control points and therefore condition the projection
    subproblems much better at order 10.
    """

    order: int
    horizon: float
    times: np.ndarray
    W: np.ndarray
    Wdot: np.ndarray
    Wddot: np.ndarray
    family: str = "monomial"

    @property
    def num_samples(self) -> int:
        return self.times.shape[0]

    @property
    def num_coeffs(self) -> int:
        return self.order + 1

    def matrices_at(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Evaluate W, Wdot, Wddot rows at arbitrary instants (seconds)."""
        builder = _bernstein_matrices if self.family == "bernstein" else _monomial_matrices
        return builder(self.order, np.asarray(times, dtype=float), self.horizon)


@dataclass(frozen=True)
class TrajectoryCoeffs:
    """Coefficient pair (c_x, c_y) of one planned trajectory."""

    cx: np.ndarray
    cy: np.ndarray

    def __post_init__(self) -> None:
        cx = np.asarray(self.cx, dtype=float)
        cy = np.asarray(self.cy, dtype=float)
        if cx.shape != cy.shape or cx.ndim != 1:
            raise ValueError(f"coefficient vectors must share one shape, got {cx.shape} / {cy.shape}")
        if not (np.isfinite(cx).all() and np.isfinite(cy).all()):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "cx", cx)
        object.__setattr__(self, "cy", cy)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.cx, self.cy])

    @staticmethod
    def from_stacked(xi: np.ndarray) -> "TrajectoryCoeffs":
        xi = np.asarray(xi, dtype=float)
        n = xi.shape[0] // 2
        return TrajectoryCoeffs(cx=xi[:n], cy=xi[n:])


@dataclass(frozen=True)
class TrajectorySamples:
    """Positions and derivatives of one trajectory on the basis grid."""

    x: np.ndarray
    y: np.ndarray
    xdot: np.ndarray
    ydot: np.ndarray
    xddot: np.ndarray
    yddot: np.ndarray

    def speed(self) -> np.ndarray:
        return np.hypot(self.xdot, self.ydot)


@dataclass(frozen=True)
class FlatControls:
    """Bicycle-model control sequence recovered from position derivatives."""

    v: np.ndarray
    delta: np.ndarray
    accel: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray


def _monomial_matrices(order: int, times: np.ndarray, horizon: float):
    tau = times / horizon
    m = times.shape[0]
    W = np.empty((m, order + 1))
    Wdot = np.zeros((m, order + 1))
    Wddot = np.zeros((m, order + 1))
    for k in range(order + 1):
        W[:, k] = tau**k
        if k >= 1:
            Wdot[:, k] = k * tau ** (k - 1) / horizon
        if k >= 2:
            Wddot[:, k] = k * (k - 1) * tau ** (k - 2) / horizon**2
    return W, Wdot, Wddot


def _bernstein_rows(degree: int, tau: np.ndarray) -> np.ndarray:
    from math import comb

    rows = np.empty((tau.shape[0], degree + 1))
    for k in range(degree + 1):
        rows[:, k] = comb(degree, k) * tau**k * (1.0 - tau) ** (degree - k)
    return rows


def _bernstein_matrices(order: int, times: np.ndarray, horizon: float):
    tau = times / horizon
    N = order
    W = _bernstein_rows(N, tau)
    # Derivatives via degree reduction: B'_{k,N} = N (B_{k-1,N-1} - B_{k,N-1}).
    lower1 = _bernstein_rows(N - 1, tau)
    pad1 = np.zeros((tau.shape[0], 1))
    Wdot = N * (np.hstack([pad1, lower1]) - np.hstack([lower1, pad1])) / horizon
    lower2 = _bernstein_rows(N - 2, tau)
    pad2 = np.zeros((tau.shape[0], 1))
    up = np.hstack([pad2, pad2, lower2])
    mid = np.hstack([pad2, lower2, pad2])
    low = np.hstack([lower2, pad2, pad2])
    Wddot = N * (N - 1) * (up - 2 * mid + low) / horizon**2
    return W, Wdot, Wddot


_FAMILIES = {"monomial": _monomial_matrices, "bernstein": _bernstein_matrices}


def build_basis(
    order: int, num_samples: int, horizon: float, family: str = "monomial"
) -> PolynomialBasis:
    """Build the sampled basis on a uniform grid over [0, horizon].

    Requires ``order >= 2`` (accelerations exist), ``num_samples >= order + 1``
    (sampling determines the coefficients), and a positive horizon.
    """
    if order < 2:
        raise ValueError(f"order must be >= 2, got {order}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if num_samples < order + 1:
        raise ValueError(
            f"num_samples={num_samples} undersamples an order-{order} polynomial "
            f"(need at least {order + 1})"
        )
    if family not in _FAMILIES:
        raise ValueError(f"unknown basis family {family!r}; choose from {sorted(_FAMILIES)}")
    times = np.linspace(0.0, horizon, num_samples)
    W, Wdot, Wddot = _FAMILIES[family](order, times, horizon)
    return PolynomialBasis(
        order=order, horizon=float(horizon), times=times, W=W, Wdot=Wdot, Wddot=Wddot, family=family
    )


def eval_trajectory(basis: PolynomialBasis, coeffs: TrajectoryCoeffs) -> TrajectorySamples:
    """Sample positions and derivatives; an exact linear map of the coefficients."""
    if coeffs.cx.shape[0] != basis.num_coeffs:
        raise ValueError(
            f"coefficient length {coeffs.cx.shape[0]} does not match basis with {basis.num_coeffs} columns"
        )
    return TrajectorySamples(
        x=basis.W @ coeffs.cx,
        y=basis.W @ coeffs.cy,
        xdot=basis.Wdot @ coeffs.cx,
        ydot=basis.Wdot @ coeffs.cy,
        xddot=basis.Wddot @ coeffs.cx,
        yddot=basis.Wddot @ coeffs.cy,
    )


def curvature_from_derivatives(
    xdot: np.ndarray, ydot: np.ndarray, xddot: np.ndarray, yddot: np.ndarray
) -> np.ndarray:
    """Signed path curvature (yddot*xdot - xddot*ydot) / speed^3."""
    v = np.hypot(xdot, ydot)
    return (yddot * xdot - xddot * ydot) / v**3


def flat_to_controls(
    basis: PolynomialBasis,
    coeffs: TrajectoryCoeffs,
    wheelbase: float,
    eps_v: float = 1e-3,
    times: np.ndarray | None = None,
) -> FlatControls:
    """Recover (v, delta, a) bicycle controls from the trajectory samples.

    The curvature formula divides by speed cubed, so any sample with speed
    at or below ``eps_v`` raises :class:`SpeedSingularity`.  ``times``
    optionally resamples the trajectory on a custom grid (e.g. a simulator
    control grid) before conversion.
    """
    if times is None:
        traj = eval_trajectory(basis, coeffs)
        xdot, ydot, xddot, yddot = traj.xdot, traj.ydot, traj.xddot, traj.yddot
    else:
        _, Wd, Wdd = basis.matrices_at(times)
        xdot, ydot = Wd @ coeffs.cx, Wd @ coeffs.cy
        xddot, yddot = Wdd @ coeffs.cx, Wdd @ coeffs.cy
    v = np.hypot(xdot, ydot)
    if np.any(v <= eps_v):
        raise SpeedSingularity(f"speed drops to {v.min():.3g} m/s (floor {eps_v:g})")
    psi = np.arctan2(ydot, xdot)
    kappa = (yddot * xdot - xddot * ydot) / v**3
    delta = np.arctan(kappa * wheelbase)
    accel = (xdot * xddot + ydot * yddot) / v
    return FlatControls(v=v, delta=delta, accel=accel, psi=psi, kappa=kappa)
