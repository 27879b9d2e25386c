"""2D driving environment: scenes, kinematic rollout and the geometric reward oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import DT, HORIZON, V_MAX, Pose, SeededRng, Trajectory, normalize_angles

REWARD_DIMS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc")
SAFETY_DIMS = ("nc", "dac", "ddc", "tlc")
TASK_DIMS = ("ep", "ttc", "lk", "hc")
BINARY_DIMS = ("nc", "dac", "ddc", "tlc", "ttc", "hc")

EGO_HALF_LENGTH = 2.0
EGO_HALF_WIDTH = 0.9
MAX_YAW_RATE = 1.0


class Difficulty(str, Enum):
    EMPTY = "empty"
    STATIC = "static"
    DYNAMIC = "dynamic"
    MIXED = "mixed"


@dataclass(frozen=True)
class OracleConfig:
    ttc_threshold: float = 1.0
    max_accel: float = 4.0
    max_jerk: float = 8.0
    ttc_probe_dt: float = 0.1


@dataclass(frozen=True)
class Scene:
    """Everything in ego frame at t=0 (x forward, y left).

    centerline rows are (s, x, y, heading) with uniform arc-length spacing.
    static_obstacles rows are axis-aligned rectangles (cx, cy, half_x, half_y);
    moving_agents rows append a constant velocity (vx, vy).
    """

    centerline: np.ndarray
    lane_half_width: float = 2.0
    static_obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    moving_agents: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    stop_line: tuple[float, bool] | None = None
    speed_limit: float = 10.0
    ego_speed: float = 10.0
    curvature: float = 0.0

    def __post_init__(self):
        cl = np.asarray(self.centerline, dtype=np.float64)
        if cl.ndim != 2 or cl.shape[1] != 4 or len(cl) < 64:
            raise ValueError("centerline must be an (N>=64, 4) array of (s, x, y, heading)")
        for name, width in (("static_obstacles", 4), ("moving_agents", 6)):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, width)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        cl.flags.writeable = False
        object.__setattr__(self, "centerline", cl)

    @property
    def has_active_stop_line(self) -> bool:
        return self.stop_line is not None and bool(self.stop_line[1])

    def agents_at(self, t: float | np.ndarray) -> np.ndarray:
        """Agent rectangles (cx, cy, hx, hy) advanced to time t; shape (..., A, 4)."""
        t = np.asarray(t, dtype=np.float64)[..., None]
        a = self.moving_agents
        cx = a[:, 0] + a[:, 4] * t
        cy = a[:, 1] + a[:, 5] * t
        hx = np.broadcast_to(a[:, 2], cx.shape)
        hy = np.broadcast_to(a[:, 3], cx.shape)
        return np.stack([cx, cy, hx, hy], axis=-1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            np.array_equal(self.centerline, other.centerline)
            and np.array_equal(self.static_obstacles, other.static_obstacles)
            and np.array_equal(self.moving_agents, other.moving_agents)
            and self.lane_half_width == other.lane_half_width
            and self.stop_line == other.stop_line
            and self.speed_limit == other.speed_limit
            and self.ego_speed == other.ego_speed
            and self.curvature == other.curvature
        )

    __hash__ = None


@dataclass(frozen=True)
class RewardVector:
    nc: float
    dac: float
    ddc: float
    tlc: float
    ep: float
    ttc: float
    lk: float
    hc: float

    def __post_init__(self):
        for name in REWARD_DIMS:
            v = float(getattr(self, name))
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"reward {name}={v} outside [0, 1]")
            object.__setattr__(self, name, v)

    @classmethod
    def from_array(cls, arr) -> "RewardVector":
        return cls(*[float(v) for v in arr])

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in REWARD_DIMS], dtype=np.float64)


class HorizonRewardTable:
    """Rewards at horizons 0.5 s .. 4.0 s; row t-1 covers the prefix up to pose t."""

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.shape != (HORIZON, len(REWARD_DIMS)):
            raise ValueError(f"expected shape (8, 8), got {arr.shape}")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("reward table entries must lie in [0, 1]")
        arr.flags.writeable = False
        self.values = arr

    @property
    def rows(self) -> list[RewardVector]:
        return [RewardVector.from_array(r) for r in self.values]

    def __getitem__(self, t: int) -> RewardVector:
        return RewardVector.from_array(self.values[t])

    def dim(self, name: str) -> np.ndarray:
        return self.values[:, REWARD_DIMS.index(name)]

    def __eq__(self, other) -> bool:
        return isinstance(other, HorizonRewardTable) and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"HorizonRewardTable(final={dict(zip(REWARD_DIMS, np.round(self.values[-1], 3)))})"


# --- centerline geometry -----------------------------------------------------------


def make_centerline(curvature: float, s_min: float = -20.0, s_max: float = 100.0, spacing: float = 0.5) -> np.ndarray:
    s = np.arange(s_min, s_max + 0.5 * spacing, spacing)
    heading = curvature * s
    if abs(curvature) < 1e-12:
        x, y = s.copy(), np.zeros_like(s)
    else:
        x = np.sin(heading) / curvature
        y = (1.0 - np.cos(heading)) / curvature
    return np.stack([s, x, y, heading], axis=1)


_TREES: dict[int, tuple[np.ndarray, cKDTree]] = {}


def _centerline_tree(centerline: np.ndarray) -> cKDTree:
    key = id(centerline)
    hit = _TREES.get(key)
    if hit is not None and hit[0] is centerline:
        return hit[1]
    if len(_TREES) > 512:
        _TREES.clear()
    tree = cKDTree(centerline[:, 1:3])
    _TREES[key] = (centerline, tree)
    return tree


def project_to_centerline(centerline: np.ndarray, pts: np.ndarray):
    """Project points (..., 2) onto the polyline.

    Returns (s, signed lateral offset with left positive, tangent heading). The
    first and last segments are extended so points past the ends still project.
    """
    pts = np.asarray(pts, dtype=np.float64)
    shape = pts.shape[:-1]
    q = pts.reshape(-1, 2)
    n_seg = len(centerline) - 1
    _, nearest = _centerline_tree(centerline).query(q)
    best_d2 = np.full(len(q), np.inf)
    best_k = np.zeros(len(q), dtype=np.int64)
    best_u = np.zeros(len(q))
    for k in (np.clip(nearest - 1, 0, n_seg - 1), np.clip(nearest, 0, n_seg - 1)):
        p0 = centerline[k, 1:3]
        seg = centerline[k + 1, 1:3] - p0
        u = np.einsum("ij,ij->i", q - p0, seg) / np.einsum("ij,ij->i", seg, seg)
        u = np.where(k == 0, np.minimum(u, 1.0), np.where(k == n_seg - 1, np.maximum(u, 0.0), np.clip(u, 0.0, 1.0)))
        d2 = np.sum((q - p0 - u[:, None] * seg) ** 2, axis=1)
        better = d2 < best_d2
        best_d2 = np.where(better, d2, best_d2)
        best_k = np.where(better, k, best_k)
        best_u = np.where(better, u, best_u)
    p0 = centerline[best_k, 1:3]
    seg = centerline[best_k + 1, 1:3] - p0
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    s_out = centerline[best_k, 0] + best_u * seg_len
    r = q - (p0 + best_u[:, None] * seg)
    lat = (seg[:, 0] * r[:, 1] - seg[:, 1] * r[:, 0]) / seg_len
    h0, h1 = centerline[best_k, 3], centerline[best_k + 1, 3]
    head = h0 + np.clip(best_u, 0.0, 1.0) * (h1 - h0)
    return s_out.reshape(shape), lat.reshape(shape), head.reshape(shape)


def point_on_centerline(centerline: np.ndarray, s: float, lateral: float = 0.0) -> tuple[float, float, float]:
    """Position at arc length s offset laterally (left positive), plus the tangent heading."""
    x = np.interp(s, centerline[:, 0], centerline[:, 1])
    y = np.interp(s, centerline[:, 0], centerline[:, 2])
    h = np.interp(s, centerline[:, 0], centerline[:, 3])
    return x - lateral * math.sin(h), y + lateral * math.cos(h), h


# --- rectangle geometry -------------------------------------------------------------


def ego_corners(poses: np.ndarray, half_length: float = EGO_HALF_LENGTH, half_width: float = EGO_HALF_WIDTH) -> np.ndarray:
    """Corners (..., 4, 2) of the ego rectangle centred at each pose."""
    c, s = np.cos(poses[..., 2]), np.sin(poses[..., 2])
    out = []
    for a, b in ((half_length, half_width), (half_length, -half_width), (-half_length, -half_width), (-half_length, half_width)):
        out.append(np.stack([poses[..., 0] + a * c - b * s, poses[..., 1] + a * s + b * c], axis=-1))
    return np.stack(out, axis=-2)


def obb_aabb_overlap(
    ego: np.ndarray,
    rect: np.ndarray,
    half_length: float = EGO_HALF_LENGTH,
    half_width: float = EGO_HALF_WIDTH,
) -> np.ndarray:
    """Separating-axis overlap of oriented ego boxes (x, y, theta) with axis-aligned boxes.

    Broadcasts ego (..., 3) against rect (..., 4) = (cx, cy, hx, hy). Touching counts
    as overlap.
    """
    c, s = np.cos(ego[..., 2]), np.sin(ego[..., 2])
    ac, as_ = np.abs(c), np.abs(s)
    dx = ego[..., 0] - rect[..., 0]
    dy = ego[..., 1] - rect[..., 1]
    hx, hy = rect[..., 2], rect[..., 3]
    sep = np.abs(dx) > hx + half_length * ac + half_width * as_
    sep |= np.abs(dy) > hy + half_length * as_ + half_width * ac
    sep |= np.abs(dx * c + dy * s) > half_length + hx * ac + hy * as_
    sep |= np.abs(-dx * s + dy * c) > half_width + hx * as_ + hy * ac
    return ~sep


def obb_aabb_gap(ego: np.ndarray, rect: np.ndarray, half_length: float = EGO_HALF_LENGTH, half_width: float = EGO_HALF_WIDTH) -> np.ndarray:
    """Largest SAT margin over the four axes; >0 means separated by at least that much along some axis."""
    c, s = np.cos(ego[..., 2]), np.sin(ego[..., 2])
    ac, as_ = np.abs(c), np.abs(s)
    dx = ego[..., 0] - rect[..., 0]
    dy = ego[..., 1] - rect[..., 1]
    hx, hy = rect[..., 2], rect[..., 3]
    gaps = [
        np.abs(dx) - (hx + half_length * ac + half_width * as_),
        np.abs(dy) - (hy + half_length * as_ + half_width * ac),
        np.abs(dx * c + dy * s) - (half_length + hx * ac + hy * as_),
        np.abs(-dx * s + dy * c) - (half_width + hx * as_ + hy * ac),
    ]
    return np.max(np.stack(gaps), axis=0)


def rect_intersects_corridor(scene: Scene, rect, grid: float = 0.1) -> bool:
    cx, cy, hx, hy = rect
    xs = np.arange(cx - hx, cx + hx + 1e-9, grid)
    ys = np.arange(cy - hy, cy + hy + 1e-9, grid)
    pts = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    _, lat, _ = project_to_centerline(scene.centerline, pts)
    return bool(np.any(np.abs(lat) <= scene.lane_half_width))


# --- scene generation ---------------------------------------------------------------


def _place_rect(centerline, s, lateral, hx, hy):
    x, y, _ = point_on_centerline(centerline, s, lateral)
    return [x, y, hx, hy]


def generate_scene(rng: SeededRng, difficulty: Difficulty | str = Difficulty.MIXED, lane_half_width: float = 2.0) -> Scene:
    difficulty = Difficulty(difficulty)
    curvature = 0.0 if rng.uniform() < 0.3 else float(rng.uniform(-0.05, 0.05))
    centerline = make_centerline(curvature)
    speed_limit = float(rng.uniform(8.0, 12.0))
    ego_speed = float(speed_limit * rng.uniform(0.6, 1.0))
    obstacles: list[list[float]] = []
    agents: list[list[float]] = []
    stop_line = None

    if difficulty in (Difficulty.STATIC, Difficulty.MIXED):
        lo = 1 if difficulty is Difficulty.STATIC else 0
        n_obs = int(rng.integers(lo, 5))
        for i in range(n_obs):
            hx, hy = float(rng.uniform(0.8, 2.5)), float(rng.uniform(0.5, 1.2))
            s = float(rng.uniform(10.0, 45.0))
            # the first obstacle of a 'static' scene sits on the lane
            lat = float(rng.uniform(-1.5, 1.5)) if (i == 0 and difficulty is Difficulty.STATIC) else float(rng.uniform(-4.0, 4.0))
            obstacles.append(_place_rect(centerline, s, lat, hx, hy))

    if difficulty in (Difficulty.DYNAMIC, Difficulty.MIXED):
        lo = 1 if difficulty is Difficulty.DYNAMIC else 0
        n_agents = int(rng.integers(lo, 3))
        for _ in range(n_agents):
            if rng.uniform() < 0.6:
                # slower lead vehicle in or near the lane
                s = float(rng.uniform(12.0, 35.0))
                lat = float(rng.uniform(-1.0, 1.0))
                x, y, h = point_on_centerline(centerline, s, lat)
                speed = float(rng.uniform(0.0, 0.6)) * speed_limit
                agents.append([x, y, 2.0, 0.9, speed * math.cos(h), speed * math.sin(h)])
            else:
                # crossing agent that reaches the lane a few seconds in
                s = float(rng.uniform(20.0, 40.0))
                side = 1.0 if rng.uniform() < 0.5 else -1.0
                lat = side * float(rng.uniform(6.0, 10.0))
                x, y, h = point_on_centerline(centerline, s, lat)
                speed = float(rng.uniform(2.0, 5.0))
                nx, ny = math.sin(h) * side, -math.cos(h) * side
                agents.append([x, y, 0.9, 0.9, speed * nx, speed * ny])

    if difficulty is not Difficulty.EMPTY and rng.uniform() < 0.3:
        stop_line = (float(rng.uniform(15.0, 40.0)), bool(rng.uniform() < 0.7))

    scene = Scene(
        centerline=centerline,
        lane_half_width=lane_half_width,
        static_obstacles=np.array(obstacles).reshape(-1, 4),
        moving_agents=np.array(agents).reshape(-1, 6),
        stop_line=stop_line,
        speed_limit=speed_limit,
        ego_speed=ego_speed,
        curvature=curvature,
    )
    if difficulty is Difficulty.STATIC and not any(rect_intersects_corridor(scene, r) for r in scene.static_obstacles):
        return generate_scene(rng, difficulty, lane_half_width)
    return scene


# --- dynamics -----------------------------------------------------------------------


def rollout_batch(controls: np.ndarray, start: np.ndarray | None = None, dt: float = DT) -> np.ndarray:
    """Unicycle integration of (..., 8, 2) (speed, yaw_rate) controls -> (..., 8, 3) poses.

    Heading is updated first and the step is taken along the new heading.
    """
    controls = np.asarray(controls, dtype=np.float64)
    if start is None:
        start = np.zeros(3)
    start = np.broadcast_to(np.asarray(start, dtype=np.float64), controls.shape[:-2] + (3,))
    theta = start[..., 2:3] + np.cumsum(controls[..., 1] * dt, axis=-1)
    x = start[..., 0:1] + np.cumsum(controls[..., 0] * np.cos(theta) * dt, axis=-1)
    y = start[..., 1:2] + np.cumsum(controls[..., 0] * np.sin(theta) * dt, axis=-1)
    return np.stack([x, y, normalize_angles(theta)], axis=-1)


def rollout_dynamics(start: Pose, controls: Sequence[tuple[float, float]], v_max: float = V_MAX) -> Trajectory:
    ctrl = np.asarray(controls, dtype=np.float64)
    if ctrl.shape != (HORIZON, 2):
        raise ValueError(f"expected {HORIZON} (speed, yaw_rate) controls, got shape {ctrl.shape}")
    if np.any(ctrl[:, 0] < 0.0) or np.any(ctrl[:, 0] > v_max):
        raise ValueError(f"speed controls must lie in [0, {v_max}]")
    if np.any(np.abs(ctrl[:, 1]) > MAX_YAW_RATE):
        raise ValueError(f"yaw rates must satisfy |w| <= {MAX_YAW_RATE}")
    return Trajectory(rollout_batch(ctrl, start.as_array()), v_max=v_max)


def step_speeds(poses: np.ndarray, dt: float = DT) -> np.ndarray:
    """Speeds over each of the 8 steps from finite differences, starting at the origin."""
    pos = poses[..., :2]
    prev = np.concatenate([np.zeros_like(pos[..., :1, :]), pos[..., :-1, :]], axis=-2)
    return np.hypot(*np.moveaxis(pos - prev, -1, 0)) / dt


# --- reward oracle ------------------------------------------------------------------


def _prefix_any(flags: np.ndarray) -> np.ndarray:
    return np.logical_or.accumulate(flags, axis=-1)


def simulate_rewards_batch(scene: Scene, poses: np.ndarray, cfg: OracleConfig = OracleConfig()) -> np.ndarray:
    """Oracle labels for N trajectories: (N, 8, 8) array of [horizon, dimension]."""
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, HORIZON, 3)
    n = len(poses)
    times = (np.arange(HORIZON) + 1) * DT
    lhw = scene.lane_half_width

    # nc: overlap with static rectangles or time-advanced agents
    collide = np.zeros((n, HORIZON), dtype=bool)
    for rect in scene.static_obstacles:
        collide |= obb_aabb_overlap(poses, rect)
    if len(scene.moving_agents):
        agents_t = scene.agents_at(times)  # (8, A, 4)
        for a in range(agents_t.shape[1]):
            collide |= obb_aabb_overlap(poses, agents_t[None, :, a, :])

    # dac / lk / ddc / ep / tlc from centerline projection
    corners = ego_corners(poses)
    _, corner_lat, _ = project_to_centerline(scene.centerline, corners)
    off_road = np.any(np.abs(corner_lat) > lhw, axis=-1)
    s_center, lat_center, tangent = project_to_centerline(scene.centerline, poses[..., :2])
    wrong_way = np.abs(np.mod(poses[..., 2] - tangent + math.pi, 2 * math.pi) - math.pi) > math.pi / 2
    red_light = np.zeros((n, HORIZON), dtype=bool)
    if scene.has_active_stop_line:
        front = np.stack(
            [poses[..., 0] + EGO_HALF_LENGTH * np.cos(poses[..., 2]), poses[..., 1] + EGO_HALF_LENGTH * np.sin(poses[..., 2])],
            axis=-1,
        )
        s_front, _, _ = project_to_centerline(scene.centerline, front)
        red_light = s_front > scene.stop_line[0]

    # ttc: constant-velocity projection of ego and agents over the next ttc_threshold seconds
    ttc_flag = np.zeros((n, HORIZON), dtype=bool)
    if len(scene.moving_agents):
        prev = np.concatenate([np.zeros((n, 1, 2)), poses[:, :-1, :2]], axis=1)
        vel = (poses[..., :2] - prev) / DT
        probes = np.arange(0.0, cfg.ttc_threshold - 1e-9, cfg.ttc_probe_dt)
        for tau in probes:
            ego_f = poses.copy()
            ego_f[..., :2] = poses[..., :2] + vel * tau
            agents_f = scene.agents_at(times + tau)  # (8, A, 4)
            for a in range(agents_f.shape[1]):
                ttc_flag |= obb_aabb_overlap(ego_f, agents_f[None, :, a, :])

    # hc: speed finite differences; v0 is the scene's initial ego speed
    speeds = np.concatenate([np.full((n, 1), scene.ego_speed), step_speeds(poses)], axis=1)
    accel = np.diff(speeds, axis=1) / DT  # (n, 8): a_k for k = 1..8
    jerk = np.diff(accel, axis=1) / DT  # (n, 7): j_k for k = 2..8
    accel_bad = np.abs(accel) > cfg.max_accel
    jerk_bad = np.concatenate([np.zeros((n, 1), dtype=bool), np.abs(jerk) > cfg.max_jerk], axis=1)

    out = np.empty((n, HORIZON, len(REWARD_DIMS)))
    out[..., 0] = ~_prefix_any(collide)
    out[..., 1] = ~_prefix_any(off_road)
    out[..., 2] = ~_prefix_any(wrong_way)
    out[..., 3] = ~_prefix_any(red_light)
    out[..., 4] = np.clip(s_center / (scene.speed_limit * times), 0.0, 1.0)
    out[..., 5] = ~_prefix_any(ttc_flag)
    max_lat = np.maximum.accumulate(np.abs(lat_center), axis=-1)
    excess = max_lat - 0.5 * lhw
    out[..., 6] = np.where(excess <= 0.0, 1.0, np.maximum(0.0, 1.0 - excess / lhw))
    out[..., 7] = ~_prefix_any(accel_bad | jerk_bad)
    return out


def simulate_rewards(scene: Scene, traj: Trajectory, cfg: OracleConfig = OracleConfig()) -> HorizonRewardTable:
    return HorizonRewardTable(simulate_rewards_batch(scene, traj.array[None], cfg)[0])


def is_all_safe(table: np.ndarray) -> np.ndarray:
    """True where nc = dac = ddc = tlc = 1 at every horizon; table (..., 8, 8)."""
    return np.all(table[..., :4] == 1.0, axis=(-1, -2))


# --- scene and label files ----------------------------------------------------------


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def write_scene(path: str | Path, scene: Scene) -> None:
    lines = [
        "[scene]",
        f"lane_half_width = {scene.lane_half_width!r}",
        f"speed_limit = {scene.speed_limit!r}",
        f"ego_speed = {scene.ego_speed!r}",
        f"curvature = {scene.curvature!r}",
        "[centerline]",
        *(_fmt(r) for r in scene.centerline),
        "[static_obstacles]",
        *(_fmt(r) for r in scene.static_obstacles),
        "[moving_agents]",
        *(_fmt(r) for r in scene.moving_agents),
        "[stop_line]",
    ]
    if scene.stop_line is not None:
        lines += [f"s = {float(scene.stop_line[0])!r}", f"active = {int(bool(scene.stop_line[1]))}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path: str | Path) -> Scene:
    sections: dict[str, list[str]] = {}
    current = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            raise ValueError(f"{path}: content before first section")
        else:
            sections[current].append(line)

    def kv(name):
        out = {}
        for row in sections.get(name, []):
            k, v = (p.strip() for p in row.split("=", 1))
            out[k] = v
        return out

    def rows(name, width):
        data = [[float(f) for f in r.split(",")] for r in sections.get(name, [])]
        return np.array(data, dtype=np.float64).reshape(-1, width)

    head = kv("scene")
    stop = kv("stop_line")
    return Scene(
        centerline=rows("centerline", 4),
        lane_half_width=float(head["lane_half_width"]),
        static_obstacles=rows("static_obstacles", 4),
        moving_agents=rows("moving_agents", 6),
        stop_line=(float(stop["s"]), bool(int(stop["active"]))) if stop else None,
        speed_limit=float(head["speed_limit"]),
        ego_speed=float(head["ego_speed"]),
        curvature=float(head["curvature"]),
    )


def write_labels(path: str | Path, records: Sequence[tuple[int, int, np.ndarray]]) -> None:
    """One line per (scene_id, traj_id) followed by 64 reals in horizon-major order."""
    with open(path, "w") as fh:
        fh.write("# scene_id,traj_id," + ",".join(f"{d}@{t + 1}" for t in range(HORIZON) for d in REWARD_DIMS) + "\n")
        for sid, tid, table in records:
            fh.write(f"{int(sid)},{int(tid)}," + _fmt(np.asarray(table).ravel()) + "\n")


def read_labels(path: str | Path) -> list[tuple[int, int, np.ndarray]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        f = line.split(",")
        if len(f) != 2 + HORIZON * len(REWARD_DIMS):
            raise ValueError(f"label line has {len(f)} fields")
        out.append((int(f[0]), int(f[1]), np.array([float(v) for v in f[2:]]).reshape(HORIZON, len(REWARD_DIMS))))
    return out
