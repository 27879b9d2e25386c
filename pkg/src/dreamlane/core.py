"""Shared geometry types, angle arithmetic, seeded randomness and trajectory files."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HORIZON = 8
DT = 0.5
V_MAX = 15.0
TWO_PI = 2.0 * math.pi


class TrajectoryError(ValueError):
    """Raised when a trajectory violates its construction invariants."""


def normalize_angle(theta: float) -> float:
    """Map an angle into [-pi, pi); in-range angles are returned unchanged (bit-exact)."""
    if -math.pi <= theta < math.pi:
        return theta
    out = (theta + math.pi) % TWO_PI - math.pi
    # fmod rounding can land exactly on +pi
    if out >= math.pi:
        out -= TWO_PI
    return out


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    out = np.mod(theta + math.pi, TWO_PI) - math.pi
    out = np.where(out >= math.pi, out - TWO_PI, out)
    return np.where((theta >= -math.pi) & (theta < math.pi), theta, out)


def wrap_angle_diff(a, b):
    """Unsigned angular distance in [0, pi]; works on scalars and arrays."""
    d = np.mod(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)), TWO_PI)
    out = np.minimum(d, TWO_PI - d)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)


class Trajectory:
    """Eight poses at 2 Hz (4 s horizon), stored as an immutable (8, 3) float64 array."""

    __slots__ = ("_arr", "dt")

    def __init__(self, poses: Sequence[Pose] | np.ndarray, *, v_max: float = V_MAX, dt: float = DT):
        if isinstance(poses, np.ndarray):
            arr = np.array(poses, dtype=np.float64, copy=True)
        else:
            arr = np.array([[p.x, p.y, p.theta] for p in poses], dtype=np.float64)
        if arr.shape != (HORIZON, 3):
            raise TrajectoryError(f"expected {HORIZON} poses of (x, y, theta), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise TrajectoryError("non-finite pose value")
        arr[:, 2] = normalize_angles(arr[:, 2])
        steps = np.diff(np.vstack([np.zeros((1, 2)), arr[:, :2]]), axis=0)
        step_len = np.hypot(steps[:, 0], steps[:, 1])
        # small slack for float round-off in integrated rollouts
        if np.any(step_len > v_max * dt * (1.0 + 1e-9)):
            k = int(np.argmax(step_len))
            raise TrajectoryError(
                f"step {k} displacement {step_len[k]:.3f} m exceeds v_max*dt = {v_max * dt:.3f} m"
            )
        arr.flags.writeable = False
        self._arr = arr
        self.dt = dt

    @classmethod
    def from_flat(cls, values: Iterable[float], **kw) -> "Trajectory":
        return cls(np.asarray(list(values), dtype=np.float64).reshape(HORIZON, 3), **kw)

    @property
    def array(self) -> np.ndarray:
        return self._arr

    @property
    def poses(self) -> list[Pose]:
        return [Pose(*row) for row in self._arr]

    def __len__(self) -> int:
        return HORIZON

    def __getitem__(self, k: int) -> Pose:
        return Pose(*self._arr[k])

    def __eq__(self, other) -> bool:
        return isinstance(other, Trajectory) and np.array_equal(self._arr, other._arr)

    def __hash__(self) -> int:
        return hash(self._arr.tobytes())

    def __repr__(self) -> str:
        e = self._arr[-1]
        return f"Trajectory(end=({e[0]:.2f}, {e[1]:.2f}, {e[2]:.3f}))"


def end_state(traj: Trajectory) -> Pose:
    return traj[HORIZON - 1]


def project_feasible(arr: np.ndarray, v_max: float = V_MAX, dt: float = DT) -> np.ndarray:
    """Shrink over-long steps of a raw (8, 3) pose array so it becomes a valid Trajectory.

    Network outputs are unconstrained; this keeps headings and shortens only the
    offending displacements, re-accumulating positions from the origin.
    """
    arr = np.array(arr, dtype=np.float64, copy=True)
    prev = np.zeros(2)
    limit = v_max * dt * (1.0 - 1e-12)
    for k in range(HORIZON):
        step = arr[k, :2] - prev
        n = math.hypot(step[0], step[1])
        if n > limit:
            step *= limit / n
        arr[k, :2] = prev + step
        prev = arr[k, :2]
    arr[:, 2] = normalize_angles(arr[:, 2])
    return arr


class SeededRng:
    """Deterministic random stream keyed by (seed, stream).

    Backed by numpy's PCG64 seeded through a SeedSequence, which is specified
    to give identical draws on every platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    def spawn(self, stream: int) -> "SeededRng":
        """Independent child stream; derived from (seed, stream) only, never from draw state."""
        return SeededRng(self.seed, (self.stream * 1_000_003 + int(stream) + 1) & 0xFFFFFFFFFFFFFFFF)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


# --- trajectory / vocabulary files -------------------------------------------------


def format_trajectory(traj: Trajectory) -> str:
    # repr() of a Python float is the shortest string that round-trips exactly
    return ",".join(repr(float(v)) for v in traj.array.ravel())


def write_trajectories(path: str | Path, trajs: Sequence[Trajectory], comments: Sequence[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.extend(format_trajectory(t) for t in trajs)
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectories(path: str | Path, **kw) -> list[Trajectory]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 3 * HORIZON:
            raise ValueError(f"{path}:{lineno}: expected {3 * HORIZON} fields, got {len(fields)}")
        out.append(Trajectory.from_flat([float(f) for f in fields], **kw))
    return out


def trajectories_to_array(trajs: Sequence[Trajectory]) -> np.ndarray:
    if not trajs:
        return np.zeros((0, HORIZON, 3))
    return np.stack([t.array for t in trajs])
