"""Trajectories and the base sampling measure for Monte-Carlo kernel estimation.

The base measure is a clipped Gaussian random walk per variable: the initial
state is standard normal and increments have standard deviation 4/sqrt(P), so
total variation magnitude is independent of the number of samples. Values are
clipped to [-20, 20] to keep robustness magnitudes bounded.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import HorizonError

__all__ = [
    "Trajectory",
    "TrajectorySet",
    "sample_mu0",
    "time_to_index",
    "time_offset_to_steps",
    "save_trajectories",
    "load_trajectories",
    "CLIP_RANGE",
]

CLIP_RANGE = 20.0

_MAGIC = b"STLT"
_VERSION = 1


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One uniformly sampled signal: values has shape (P, k)."""

    values: np.ndarray
    horizon: float

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ValueError(f"trajectory values must be (P>=2, k), got {self.values.shape}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trajectory contains non-finite values")
        self.values.setflags(write=False)

    @property
    def points(self) -> int:
        return self.values.shape[0]

    @property
    def num_vars(self) -> int:
        return self.values.shape[1]

    @property
    def time_step(self) -> float:
        return self.horizon / (self.points - 1)


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """N trajectories sharing shape and horizon: values has shape (N, P, k)."""

    values: np.ndarray
    horizon: float
    seed: int | None = None

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] < 1 or self.values.shape[1] < 2:
            raise ValueError(f"set values must be (N>=1, P>=2, k), got {self.values.shape}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def points(self) -> int:
        return self.values.shape[1]

    @property
    def num_vars(self) -> int:
        return self.values.shape[2]

    @property
    def time_step(self) -> float:
        return self.horizon / (self.points - 1)

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.values[i], self.horizon)


def sample_mu0(n: int, points: int, num_vars: int, horizon: float, seed: int) -> TrajectorySet:
    """Draw ``n`` independent random-walk trajectories; deterministic in ``seed``."""
    if n < 1 or points < 2 or num_vars < 1:
        raise ValueError(f"bad shape n={n} points={points} vars={num_vars}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    rng = np.random.default_rng(seed)
    start = rng.standard_normal((n, 1, num_vars))
    step_scale = 4.0 / math.sqrt(points)
    steps = rng.standard_normal((n, points - 1, num_vars)) * step_scale
    walk = np.concatenate([start, steps], axis=1).cumsum(axis=1)
    np.clip(walk, -CLIP_RANGE, CLIP_RANGE, out=walk)
    return TrajectorySet(walk, horizon, seed)


def time_offset_to_steps(t: float, time_step: float) -> int:
    """Map a non-negative time offset onto grid steps, rounding half up."""
    return int(math.floor(t / time_step + 0.5))


def time_to_index(t: float, traj: Trajectory) -> int:
    """Nearest grid index for absolute time ``t`` in [0, horizon]."""
    if t < 0 or t > traj.horizon:
        raise HorizonError(f"time {t} outside [0, {traj.horizon}]")
    return min(time_offset_to_steps(t, traj.time_step), traj.points - 1)


# ---------------------------------------------------------------------------
# Binary cache: magic, u32 version, u32 N, u32 P, u32 k, f64 horizon, then
# f32 values row-major, all little-endian.

def save_trajectories(ts: TrajectorySet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIId", _VERSION, ts.n, ts.points, ts.num_vars, ts.horizon))
        fh.write(np.ascontiguousarray(ts.values, dtype="<f4").tobytes())


def load_trajectories(path) -> TrajectorySet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad trajectory cache magic {magic!r}")
        version, n, points, num_vars, horizon = struct.unpack("<IIIId", fh.read(24))
        if version != _VERSION:
            raise ValueError(f"unsupported trajectory cache version {version}")
        raw = fh.read(n * points * num_vars * 4)
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if values.size != n * points * num_vars:
            raise ValueError("truncated trajectory cache")
    return TrajectorySet(values.reshape(n, points, num_vars), horizon)
