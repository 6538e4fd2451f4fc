"""Boolean satisfaction and quantitative robustness over sampled trajectories.

Robustness follows the standard recursive definitions: predicates measure the
signed margin x_i(t) - theta (theta - x_i(t) for <=/<), negation flips sign,
and/or are min/max, eventually/always are sliding max/min over the shifted
window, and until is the max-min-min form that reduces to eventually when the
left operand is the constant true. Windows are inclusive index ranges obtained
by rounding time bounds half-up onto the grid.

Evaluation is vectorized: each node produces the full series rho(node, xi, t)
for every valid t across all trajectories at once, with sliding extrema
computed by linear-time 1-d filters. A naive single-point recursion over the
same definitions lives in the test suite as the independent oracle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from . import formula as fm
from .errors import HorizonError
from .signals import Trajectory, TrajectorySet, time_offset_to_steps

__all__ = [
    "TOP_ROBUSTNESS",
    "RobustnessVector",
    "robustness",
    "satisfies",
    "robustness_vector",
    "robustness_matrix",
    "horizon_steps",
    "save_robustness",
    "load_robustness",
]

# Finite stand-in for the robustness of the constant true: large enough to win
# min/max against clipped signals, small enough to keep kernel integrals tame.
TOP_ROBUSTNESS = 10.0

_MAGIC = b"STLR"
_VERSION = 1


@dataclass(frozen=True, eq=False)
class RobustnessVector:
    """Robustness of one formula at t=0 across a trajectory set."""

    values: np.ndarray
    formula_id: str | None = None

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError(f"robustness vector must be 1-d, got {self.values.shape}")
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return self.values.shape[0]


def _window(iv: fm.Interval, time_step: float) -> tuple[int, int]:
    return (
        time_offset_to_steps(iv.start, time_step),
        time_offset_to_steps(iv.end, time_step),
    )


def horizon_steps(f: fm.Formula, time_step: float) -> int:
    """Grid steps beyond t needed to evaluate ``f`` at index t."""
    if isinstance(f, (fm.Top, fm.Predicate)):
        return 0
    if isinstance(f, fm.Not):
        return horizon_steps(f.child, time_step)
    if isinstance(f, (fm.And, fm.Or)):
        return max(horizon_steps(f.left, time_step), horizon_steps(f.right, time_step))
    if isinstance(f, (fm.Eventually, fm.Always)):
        _, ib = _window(f.interval, time_step)
        return ib + horizon_steps(f.child, time_step)
    if isinstance(f, fm.Until):
        _, ib = _window(f.interval, time_step)
        return ib + max(horizon_steps(f.left, time_step), horizon_steps(f.right, time_step))
    raise TypeError(f"not a formula: {f!r}")


def _slide(series: np.ndarray, size: int, take_max: bool) -> np.ndarray:
    """m[..., i] = extremum of series[..., i:i+size]; trailing entries are edge junk."""
    filt = maximum_filter1d if take_max else minimum_filter1d
    return filt(series, size=size, axis=-1, mode="nearest", origin=-(size // 2))


def _series(f: fm.Formula, x: np.ndarray, time_step: float, boolean: bool) -> np.ndarray:
    """Evaluate rho (or 0/1 satisfaction when ``boolean``) for all valid t.

    ``x`` has shape (N, P, k); the result has shape (N, L) with
    L = P - horizon_steps(f).
    """
    if isinstance(f, fm.Top):
        fill = 1.0 if boolean else TOP_ROBUSTNESS
        return np.full(x.shape[:2], fill)
    if isinstance(f, fm.Predicate):
        vals = x[:, :, f.var]
        if boolean:
            if f.cmp == ">=":
                return (vals >= f.threshold).astype(np.float64)
            if f.cmp == ">":
                return (vals > f.threshold).astype(np.float64)
            if f.cmp == "<=":
                return (vals <= f.threshold).astype(np.float64)
            return (vals < f.threshold).astype(np.float64)
        if f.cmp in (">=", ">"):
            return vals - f.threshold
        return f.threshold - vals
    if isinstance(f, fm.Not):
        child = _series(f.child, x, time_step, boolean)
        return 1.0 - child if boolean else -child
    if isinstance(f, (fm.And, fm.Or)):
        left = _series(f.left, x, time_step, boolean)
        right = _series(f.right, x, time_step, boolean)
        n = min(left.shape[1], right.shape[1])
        op = np.minimum if isinstance(f, fm.And) else np.maximum
        return op(left[:, :n], right[:, :n])
    if isinstance(f, (fm.Eventually, fm.Always)):
        child = _series(f.child, x, time_step, boolean)
        ia, ib = _window(f.interval, time_step)
        out_len = child.shape[1] - ib
        if out_len <= 0:
            raise HorizonError(
                f"window [{f.interval.start},{f.interval.end}] incompatible with horizon: "
                f"needs {ib + 1} points, child series has {child.shape[1]}"
            )
        take_max = isinstance(f, fm.Eventually)
        m = _slide(child, ib - ia + 1, take_max)
        return m[:, ia:ia + out_len]
    if isinstance(f, fm.Until):
        left = _series(f.left, x, time_step, boolean)
        right = _series(f.right, x, time_step, boolean)
        ia, ib = _window(f.interval, time_step)
        out_len = min(left.shape[1], right.shape[1]) - ib
        if out_len <= 0:
            raise HorizonError(
                f"until window [{f.interval.start},{f.interval.end}] incompatible with "
                f"horizon: needs {ib + 1} points, operand series have "
                f"{min(left.shape[1], right.shape[1])}"
            )
        out = np.full((x.shape[0], out_len), -np.inf)
        running = left  # min of left over [t, t+d], shrinking with d
        for d in range(ib + 1):
            if d > 0:
                running = np.minimum(running[:, :-1], left[:, d:])
            if d >= ia:
                cand = np.minimum(running[:, :out_len], right[:, d:d + out_len])
                np.maximum(out, cand, out=out)
        return out
    raise TypeError(f"not a formula: {f!r}")


def _check_index(series_len: int, t_index: int) -> None:
    if t_index < 0:
        raise ValueError(f"negative time index {t_index}")
    if t_index >= series_len:
        raise HorizonError(
            f"formula incompatible with horizon at index {t_index}: "
            f"only {series_len} evaluation points available"
        )


def robustness(f: fm.Formula, xi: Trajectory, t_index: int = 0) -> float:
    series = _series(f, xi.values[None], xi.time_step, boolean=False)
    _check_index(series.shape[1], t_index)
    return float(series[0, t_index])


def satisfies(f: fm.Formula, xi: Trajectory, t_index: int = 0) -> bool:
    series = _series(f, xi.values[None], xi.time_step, boolean=True)
    _check_index(series.shape[1], t_index)
    return bool(series[0, t_index] > 0.5)


def robustness_vector(
    f: fm.Formula, ts: TrajectorySet, formula_id: str | None = None
) -> RobustnessVector:
    """Robustness at t=0 for every trajectory in the set."""
    try:
        series = _series(f, ts.values, ts.time_step, boolean=False)
    except HorizonError as exc:
        raise HorizonError(f"formula {formula_id or fm.print_formula(f)!r}: {exc}") from exc
    _check_index(series.shape[1], 0)
    return RobustnessVector(series[:, 0].copy(), formula_id)


def robustness_matrix(formulae, ts: TrajectorySet, ids=None) -> np.ndarray:
    """Stack robustness vectors for several formulae: shape (B, N)."""
    ids = ids if ids is not None else [None] * len(formulae)
    rows = [robustness_vector(f, ts, i).values for f, i in zip(formulae, ids)]
    return np.stack(rows) if rows else np.empty((0, ts.n))


# ---------------------------------------------------------------------------
# Robustness cache: same container layout as the trajectory cache, one row per
# formula. Header: magic, u32 version, u32 rows, u32 cols, then f32 data.

def save_robustness(matrix: np.ndarray, path) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def load_robustness(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad robustness cache magic {magic!r}")
        version, rows, cols = struct.unpack("<III", fh.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported robustness cache version {version}")
        values = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4").astype(np.float64)
        if values.size != rows * cols:
            raise ValueError("truncated robustness cache")
    return values.reshape(rows, cols)
