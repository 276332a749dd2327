"""Behavioral set-point parametrization.

A behavior sample assigns one lateral-offset and one speed set-point to
each contiguous horizon segment, optionally followed by a terminal goal
position.  Samples travel through the optimizer as flat vectors in the
layout ``[y_d1..y_dM, v_d1..v_dM, (x_f, y_f)]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamLayout:
    """Flattened layout of a behavior vector."""

    m_seg: int
    with_goal: bool = False

    def __post_init__(self) -> None:
        if self.m_seg < 1:
            raise ValueError(f"m_seg must be >= 1, got {self.m_seg}")

    @property
    def dim(self) -> int:
        return 2 * self.m_seg + (2 if self.with_goal else 0)

    @property
    def names(self) -> list[str]:
        names = [f"y_d{i + 1}" for i in range(self.m_seg)]
        names += [f"v_d{i + 1}" for i in range(self.m_seg)]
        if self.with_goal:
            names += ["x_f", "y_f"]
        return names


@dataclass(frozen=True)
class BehaviorParams:
    """One behavior sample: per-segment set-points plus an optional goal."""

    y_d: np.ndarray
    v_d: np.ndarray
    goal: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        y_d = np.atleast_1d(np.asarray(self.y_d, dtype=float))
        v_d = np.atleast_1d(np.asarray(self.v_d, dtype=float))
        if y_d.shape != v_d.shape:
            raise ValueError(f"y_d and v_d must match, got {y_d.shape} / {v_d.shape}")
        if not (np.isfinite(y_d).all() and np.isfinite(v_d).all()):
            raise ValueError("set-points must be finite")
        object.__setattr__(self, "y_d", y_d)
        object.__setattr__(self, "v_d", v_d)

    @property
    def m_seg(self) -> int:
        return self.y_d.shape[0]

    def layout(self) -> ParamLayout:
        return ParamLayout(m_seg=self.m_seg, with_goal=self.goal is not None)

    def to_vector(self) -> np.ndarray:
        parts = [self.y_d, self.v_d]
        if self.goal is not None:
            parts.append(np.asarray(self.goal, dtype=float))
        return np.concatenate(parts)

    @staticmethod
    def from_vector(vec: np.ndarray, layout: ParamLayout) -> "BehaviorParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (layout.dim,):
            raise ValueError(f"vector shape {vec.shape} does not match layout dim {layout.dim}")
        m = layout.m_seg
        goal = (float(vec[2 * m]), float(vec[2 * m + 1])) if layout.with_goal else None
        return BehaviorParams(y_d=vec[:m], v_d=vec[m : 2 * m], goal=goal)


def segment_members(num_samples: int, m_seg: int) -> list[np.ndarray]:
    """Contiguous, as-equal-as-possible partition of sample indices."""
    if m_seg < 1 or m_seg > num_samples:
        raise ValueError(f"cannot split {num_samples} samples into {m_seg} segments")
    return np.array_split(np.arange(num_samples), m_seg)


def segment_matrix(num_samples: int, m_seg: int) -> np.ndarray:
    """(num_samples, m_seg) one-hot matrix repeating set-points over segments."""
    S = np.zeros((num_samples, m_seg))
    for seg, members in enumerate(segment_members(num_samples, m_seg)):
        S[members, seg] = 1.0
    return S


class WarmStartSource:
    """Behavior samples read from a file, replayed cyclically.

    File format: one header line naming the layout fields (comma separated),
    then one comma-separated record per line with the flattened behavior
    vector in layout order.
    """

    def __init__(self, samples: np.ndarray, layout: ParamLayout):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != layout.dim:
            raise ValueError(f"expected (n, {layout.dim}) samples, got {samples.shape}")
        if samples.shape[0] == 0:
            raise ValueError("warm-start source holds no samples")
        self.samples = samples
        self.layout = layout

    def draw(self, n: int) -> np.ndarray:
        reps = int(np.ceil(n / self.samples.shape[0]))
        return np.tile(self.samples, (reps, 1))[:n]

    @staticmethod
    def from_file(path: str, layout: ParamLayout) -> "WarmStartSource":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            names = [h.strip() for h in header.split(",")]
            if names != layout.names:
                raise ValueError(f"warm-start header {names} does not match layout {layout.names}")
            rows = [
                [float(tok) for tok in line.strip().split(",")]
                for line in fh
                if line.strip()
            ]
        return WarmStartSource(np.asarray(rows, dtype=float), layout)

    @staticmethod
    def write_file(path: str, samples: np.ndarray, layout: ParamLayout) -> None:
        samples = np.asarray(samples, dtype=float)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(layout.names) + "\n")
            for row in samples:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
