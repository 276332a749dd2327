"""Bi-level behavior and trajectory planning for highway driving.

The lower level solves batches of equality-constrained QPs sharing one
factorized KKT system and projects the solutions onto collision and
kinematic constraints by alternating minimization.  The upper level adapts
a Gaussian distribution over behavioral set-points with a cross-entropy
style update.  A deterministic multi-lane micro-simulator and a benchmark
harness compare the bi-level planner against sampling-based MPC baselines.
"""

__version__ = "0.1.0"
