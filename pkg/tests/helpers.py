"""Shared test utilities: random formula generation and the naive oracle.

The oracle evaluates robustness and satisfaction at a single time point by
direct recursion over the defining equations, using plain Python loops. It is
deliberately independent of the vectorized production evaluator.
"""

from __future__ import annotations

import math

import numpy as np

from stldistill import formula as fm
from stldistill.signals import Trajectory

TOP_RHO = 10.0


# ---------------------------------------------------------------------------
# Random formulae

def random_interval(rng: np.random.Generator, max_start=4, max_width=6) -> fm.Interval:
    start = float(rng.integers(0, max_start + 1))
    width = float(rng.integers(1, max_width + 1))
    if rng.random() < 0.3:
        start = round(start + float(rng.random()), 5)
    if rng.random() < 0.3:
        width = round(width + float(rng.random()), 5)
    return fm.Interval(round(start, 5), round(start + width, 5))


def random_predicate(rng: np.random.Generator, num_vars=3) -> fm.Predicate:
    var = int(rng.integers(0, num_vars))
    cmp = str(rng.choice(fm.COMPARISONS))
    threshold = round(float(rng.normal(0.0, 2.0)), 5)
    return fm.Predicate(var, cmp, threshold)


def random_formula(
    rng: np.random.Generator,
    max_depth: int = 6,
    num_vars: int = 3,
    max_start: int = 4,
    max_width: int = 6,
) -> fm.Formula:
    """Random tree of bounded depth with small temporal windows."""
    if max_depth <= 1:
        if rng.random() < 0.05:
            return fm.Top()
        return random_predicate(rng, num_vars)
    kind = rng.choice(
        ["leaf", "not", "and", "or", "eventually", "always", "until"],
        p=[0.28, 0.12, 0.13, 0.13, 0.13, 0.13, 0.08],
    )
    sub = lambda: random_formula(rng, max_depth - 1, num_vars, max_start, max_width)
    if kind == "leaf":
        return random_formula(rng, 1, num_vars)
    if kind == "not":
        return fm.Not(sub())
    if kind == "and":
        return fm.And(sub(), sub())
    if kind == "or":
        return fm.Or(sub(), sub())
    iv = random_interval(rng, max_start, max_width)
    if kind == "eventually":
        return fm.Eventually(iv, sub())
    if kind == "always":
        return fm.Always(iv, sub())
    return fm.Until(iv, sub(), sub())


# ---------------------------------------------------------------------------
# Naive oracle

def _steps(t: float, dt: float) -> int:
    return int(math.floor(t / dt + 0.5))


def oracle_robustness(f: fm.Formula, traj: Trajectory, t: int) -> float:
    dt = traj.time_step
    p = traj.points
    if isinstance(f, fm.Top):
        return TOP_RHO
    if isinstance(f, fm.Predicate):
        value = float(traj.values[t, f.var])
        if f.cmp in (">=", ">"):
            return value - f.threshold
        return f.threshold - value
    if isinstance(f, fm.Not):
        return -oracle_robustness(f.child, traj, t)
    if isinstance(f, fm.And):
        return min(oracle_robustness(f.left, traj, t), oracle_robustness(f.right, traj, t))
    if isinstance(f, fm.Or):
        return max(oracle_robustness(f.left, traj, t), oracle_robustness(f.right, traj, t))
    if isinstance(f, (fm.Eventually, fm.Always)):
        lo, hi = t + _steps(f.interval.start, dt), t + _steps(f.interval.end, dt)
        if hi >= p:
            raise OverflowError("window exceeds horizon")
        vals = [oracle_robustness(f.child, traj, u) for u in range(lo, hi + 1)]
        return max(vals) if isinstance(f, fm.Eventually) else min(vals)
    if isinstance(f, fm.Until):
        lo, hi = t + _steps(f.interval.start, dt), t + _steps(f.interval.end, dt)
        if hi >= p:
            raise OverflowError("window exceeds horizon")
        best = -math.inf
        for u in range(lo, hi + 1):
            rhs = oracle_robustness(f.right, traj, u)
            lhs = min(oracle_robustness(f.left, traj, v) for v in range(t, u + 1))
            best = max(best, min(rhs, lhs))
        return best
    raise TypeError(f"not a formula: {f!r}")


def oracle_satisfies(f: fm.Formula, traj: Trajectory, t: int) -> bool:
    dt = traj.time_step
    p = traj.points
    if isinstance(f, fm.Top):
        return True
    if isinstance(f, fm.Predicate):
        value = float(traj.values[t, f.var])
        if f.cmp == ">=":
            return value >= f.threshold
        if f.cmp == ">":
            return value > f.threshold
        if f.cmp == "<=":
            return value <= f.threshold
        return value < f.threshold
    if isinstance(f, fm.Not):
        return not oracle_satisfies(f.child, traj, t)
    if isinstance(f, fm.And):
        return oracle_satisfies(f.left, traj, t) and oracle_satisfies(f.right, traj, t)
    if isinstance(f, fm.Or):
        return oracle_satisfies(f.left, traj, t) or oracle_satisfies(f.right, traj, t)
    if isinstance(f, (fm.Eventually, fm.Always)):
        lo, hi = t + _steps(f.interval.start, dt), t + _steps(f.interval.end, dt)
        if hi >= p:
            raise OverflowError("window exceeds horizon")
        vals = (oracle_satisfies(f.child, traj, u) for u in range(lo, hi + 1))
        return any(vals) if isinstance(f, fm.Eventually) else all(vals)
    if isinstance(f, fm.Until):
        lo, hi = t + _steps(f.interval.start, dt), t + _steps(f.interval.end, dt)
        if hi >= p:
            raise OverflowError("window exceeds horizon")
        for u in range(lo, hi + 1):
            if oracle_satisfies(f.right, traj, u) and all(
                oracle_satisfies(f.left, traj, v) for v in range(t, u + 1)
            ):
                return True
        return False
    raise TypeError(f"not a formula: {f!r}")


def horizon_compatible(f: fm.Formula, traj_points: int, dt: float) -> bool:
    """True when the formula can be evaluated at t=0 on a grid of that length."""
    from stldistill.semantics import horizon_steps

    return horizon_steps(f, dt) < traj_points
