"""Shortcut-forcing latent world model.

A rectified-flow velocity network conditioned on signal level t and step size d
predicts the next latent frame from the last four latents and the ego action.
Large steps are trained against two half-steps of the same network (gradients
blocked), so one to four Euler steps give the same prediction as sixteen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DT, HORIZON, Pose, SeededRng
from .env import EGO_HALF_LENGTH, Scene, project_to_centerline
from .nn import AdamW, DenseNet, Module, NonFiniteError

N_HISTORY = 4
N_SECTORS = 8
SECTOR_CLAMP = 30.0
PREVIEW_DISTANCES = (10.0, 25.0)
FEATURE_NAMES = (
    "lateral",
    "heading_err",
    "speed",
    *(f"sector{i}" for i in range(N_SECTORS)),
    "stop_dist",
    *(f"preview{int(d)}" for d in PREVIEW_DISTANCES),
)
N_FEATURES = len(FEATURE_NAMES)
# fixed input scaling of the observation encoder, one entry per feature
FEATURE_SCALE = np.array([0.5, 2.0, 0.1] + [1.0 / 10.0] * N_SECTORS + [1.0 / 15.0] + [0.1] * len(PREVIEW_DISTANCES))


# --- step grid ------------------------------------------------------------------------


@dataclass(frozen=True)
class StepGrid:
    k_max: int = 16

    def __post_init__(self):
        if self.k_max < 1 or self.k_max & (self.k_max - 1):
            raise ValueError(f"k_max must be a power of two, got {self.k_max}")

    @property
    def d_min(self) -> float:
        return 1.0 / self.k_max

    @property
    def step_sizes(self) -> tuple[float, ...]:
        """Admissible d, largest first: 1, 1/2, ..., 1/k_max."""
        n = int(math.log2(self.k_max))
        return tuple(1.0 / 2**k for k in range(n + 1))

    def is_admissible(self, d: float) -> bool:
        return any(d == s for s in self.step_sizes)


def sample_training_pairs(rng: SeededRng, grid: StepGrid, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n draws of d ~ 1/U{1,2,4,..,K_max} and t ~ U{0, d, .., 1-d}."""
    counts = np.array([2**k for k in range(int(math.log2(grid.k_max)) + 1)])
    m = counts[rng.integers(0, len(counts), size=n)]
    d = 1.0 / m
    t = rng.integers(0, m) / m
    return t, d


def sample_training_pair(rng: SeededRng, grid: StepGrid) -> tuple[float, float]:
    t, d = sample_training_pairs(rng, grid, 1)
    return float(t[0]), float(d[0])


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    d: np.ndarray
    xt: np.ndarray
    v: np.ndarray

    @classmethod
    def build(cls, x0, x1, t, d) -> "FlowSample":
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        tt = t[..., None] if t.ndim == x1.ndim - 1 else t
        return cls(x0, x1, t, d, tt * x1 + (1.0 - tt) * x0, x1 - x0)


def loss_weight(t):
    """Signal-level weight 0.9 t + 0.1."""
    return 0.9 * np.asarray(t, dtype=np.float64) + 0.1


def sinusoidal_embedding(u: np.ndarray, dim: int = 8) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)[..., None]
    freqs = math.pi * 2.0 ** np.arange(dim // 2)
    return np.concatenate([np.sin(freqs * u), np.cos(freqs * u)], axis=-1)


def embed_step_size(d: np.ndarray, grid: StepGrid, dim: int = 8) -> np.ndarray:
    # log2(1/d) / log2(k_max) lies in [0, 1] for admissible sizes
    span = max(math.log2(grid.k_max), 1.0)
    return sinusoidal_embedding(np.log2(1.0 / np.asarray(d, dtype=np.float64)) / span, dim)


# --- observation features ---------------------------------------------------------------


def _rect_boundary(rects: np.ndarray, n: int = 16) -> np.ndarray:
    """Points on the perimeter of (..., 4) rectangles -> (..., 4n + 4, 2), corners included."""
    u = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    cx, cy, hx, hy = (rects[..., i:i + 1] for i in range(4))
    sides = [
        (cx + u * hx, cy + hy + 0 * u),
        (cx + u * hx, cy - hy + 0 * u),
        (cx + hx + 0 * u, cy + u * hy),
        (cx - hx + 0 * u, cy + u * hy),
    ]
    corners = [(cx + sx * hx, cy + sy * hy) for sx in (-1, 1) for sy in (-1, 1)]
    xs = np.concatenate([s[0] for s in sides] + [c[0] for c in corners], axis=-1)
    ys = np.concatenate([s[1] for s in sides] + [c[1] for c in corners], axis=-1)
    return np.stack([xs, ys], axis=-1)


def observation_features(scene: Scene, poses: np.ndarray, speeds: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Raw (N, 14) features for poses (N, 3) at the given speeds and scene times.

    lateral offset (m, left positive), heading error vs tangent (rad), speed,
    nearest-obstacle distance in 8 sectors of 45 deg (sector 0 straight ahead,
    counterclockwise, clamped at 30 m, 0 when inside), signed arc-length distance
    from the ego front to an active stop line (clamped to +-30 m), and the
    centerline's lateral position in the ego frame 10 m and 25 m further along.
    """
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3)
    n = len(poses)
    speeds = np.broadcast_to(np.asarray(speeds, dtype=np.float64), (n,))
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (n,))
    s, lat, tangent = project_to_centerline(scene.centerline, poses[:, :2])
    heading_err = np.mod(poses[:, 2] - tangent + math.pi, 2 * math.pi) - math.pi

    sectors = np.full((n, N_SECTORS), SECTOR_CLAMP)
    pts_list = []
    if len(scene.static_obstacles):
        pts = _rect_boundary(scene.static_obstacles).reshape(-1, 2)
        pts_list.append(np.broadcast_to(pts, (n,) + pts.shape))
    if len(scene.moving_agents):
        rects = scene.agents_at(times)  # (n, A, 4)
        pts_list.append(_rect_boundary(rects).reshape(n, -1, 2))
    if pts_list:
        pts = np.concatenate(pts_list, axis=1)  # (n, P, 2)
        rel = pts - poses[:, None, :2]
        c, sn = np.cos(poses[:, 2])[:, None], np.sin(poses[:, 2])[:, None]
        lx = rel[..., 0] * c + rel[..., 1] * sn
        ly = -rel[..., 0] * sn + rel[..., 1] * c
        dist = np.hypot(lx, ly)
        ang = np.mod(np.arctan2(ly, lx) + math.pi / N_SECTORS, 2 * math.pi)
        idx = np.minimum((ang / (2 * math.pi / N_SECTORS)).astype(np.int64), N_SECTORS - 1)
        rows = np.repeat(np.arange(n), dist.shape[1])
        np.minimum.at(sectors, (rows, idx.ravel()), dist.ravel())
        inside = np.zeros(n, dtype=bool)
        for rect in scene.static_obstacles:
            inside |= (np.abs(poses[:, 0] - rect[0]) <= rect[2]) & (np.abs(poses[:, 1] - rect[1]) <= rect[3])
        if len(scene.moving_agents):
            r = scene.agents_at(times)
            inside |= np.any((np.abs(poses[:, None, 0] - r[..., 0]) <= r[..., 2]) & (np.abs(poses[:, None, 1] - r[..., 1]) <= r[..., 3]), axis=1)
        sectors[inside] = 0.0
    sectors = np.minimum(sectors, SECTOR_CLAMP)

    if scene.has_active_stop_line:
        stop = np.clip(scene.stop_line[0] - (s + EGO_HALF_LENGTH), -SECTOR_CLAMP, SECTOR_CLAMP)
    else:
        stop = np.full(n, SECTOR_CLAMP)
    preview = []
    cl = scene.centerline
    c, sn = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    for ahead in PREVIEW_DISTANCES:
        px = np.interp(s + ahead, cl[:, 0], cl[:, 1])
        py = np.interp(s + ahead, cl[:, 0], cl[:, 2])
        preview.append(-(px - poses[:, 0]) * sn + (py - poses[:, 1]) * c)
    return np.column_stack([lat, heading_err, speeds, sectors, stop, *preview])


def history_poses(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ego poses, speeds and times for frames -3..0: straight approach at the initial speed."""
    times = (np.arange(N_HISTORY) - (N_HISTORY - 1)) * DT
    poses = np.zeros((N_HISTORY, 3))
    poses[:, 0] = scene.ego_speed * times
    return poses, np.full(N_HISTORY, scene.ego_speed), times


def trajectory_observations(scene: Scene, trajs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Poses, speeds and times of frames 1..8 for (N, 8, 3) trajectories."""
    trajs = np.asarray(trajs, dtype=np.float64).reshape(-1, HORIZON, 3)
    prev = np.concatenate([np.zeros((len(trajs), 1, 2)), trajs[:, :-1, :2]], axis=1)
    speeds = np.hypot(*np.moveaxis(trajs[..., :2] - prev, -1, 0)) / DT
    times = np.broadcast_to((np.arange(HORIZON) + 1) * DT, speeds.shape)
    return trajs, speeds, times


def local_actions(trajs: np.ndarray) -> np.ndarray:
    """Per-step displacement (dx, dy, dtheta) expressed in the previous pose's frame; (N, 8, 3)."""
    trajs = np.asarray(trajs, dtype=np.float64).reshape(-1, HORIZON, 3)
    prev = np.concatenate([np.zeros((len(trajs), 1, 3)), trajs[:, :-1]], axis=1)
    d = trajs[..., :2] - prev[..., :2]
    c, s = np.cos(prev[..., 2]), np.sin(prev[..., 2])
    dth = np.mod(trajs[..., 2] - prev[..., 2] + math.pi, 2 * math.pi) - math.pi
    return np.stack([d[..., 0] * c + d[..., 1] * s, -d[..., 0] * s + d[..., 1] * c, dth], axis=-1)


# --- model ------------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldModelConfig:
    latent_dim: int = 32
    n_history: int = N_HISTORY
    action_dim: int = 3
    action_embed: int = 16
    hidden: int = 128
    embed_dim: int = 8
    k_max: int = 16
    obs_hidden: int = 64


class WorldModelNet(Module):
    """Velocity network plus observation and action encoders.

    The observation encoder is a fixed random projection (it stands in for a
    pretrained frozen encoder) and is excluded from training updates.
    """

    def __init__(self, cfg: WorldModelConfig, rng: SeededRng):
        super().__init__()
        self.cfg = cfg
        self.grid = StepGrid(cfg.k_max)
        L = cfg.latent_dim
        self.obs_encoder = DenseNet([N_FEATURES, cfg.obs_hidden, L], ["tanh", "tanh"], rng.spawn(1))
        self.action_encoder = None
        if cfg.action_dim:
            self.action_encoder = DenseNet([cfg.action_dim, cfg.action_embed, cfg.action_embed], ["tanh", "identity"], rng.spawn(2))
        self.context_width = cfg.n_history * L + (cfg.action_embed if cfg.action_dim else 0)
        in_w = L + self.context_width + 2 * cfg.embed_dim
        self.velocity = DenseNet([in_w, cfg.hidden, cfg.hidden, L], ["relu", "relu", "identity"], rng.spawn(3))
        # the flow generates the standardized change from the newest history frame;
        # these two vectors are fitted from data, never by the optimizer
        self.params["delta_mean"] = np.zeros(L)
        self.params["delta_scale"] = np.ones(L)
        self.zero_grad()

    def children(self):
        out = {"velocity": self.velocity, "obs_encoder": self.obs_encoder}
        if self.action_encoder is not None:
            out["action_encoder"] = self.action_encoder
        return out

    def trainable(self) -> list[DenseNet]:
        return [m for m in (self.velocity, self.action_encoder) if m is not None]

    # encoding -----------------------------------------------------------------------
    def encode_features(self, feats: np.ndarray) -> np.ndarray:
        return self.obs_encoder(np.asarray(feats) * FEATURE_SCALE).astype(np.float64)

    def encode_observation(self, scene: Scene, pose: Pose, speed: float, time: float = 0.0) -> np.ndarray:
        return self.encode_features(observation_features(scene, pose.as_array()[None], speed, time))[0]

    def history_latents(self, scene: Scene) -> np.ndarray:
        return self.encode_features(observation_features(scene, *history_poses(scene)))

    def trajectory_latents(self, scene: Scene, trajs: np.ndarray) -> np.ndarray:
        poses, speeds, times = trajectory_observations(scene, trajs)
        feats = observation_features(scene, poses.reshape(-1, 3), speeds.ravel(), times.ravel())
        return self.encode_features(feats).reshape(len(poses), HORIZON, -1)

    # velocity field -----------------------------------------------------------------
    def _inputs(self, x, t, d, ctx):
        n = len(x)
        parts = [x]
        if ctx is not None and ctx.shape[-1]:
            parts.append(np.broadcast_to(ctx, (n, ctx.shape[-1])))
        parts.append(sinusoidal_embedding(np.broadcast_to(t, (n,)), self.cfg.embed_dim))
        parts.append(embed_step_size(np.broadcast_to(d, (n,)), self.grid, self.cfg.embed_dim))
        return np.concatenate(parts, axis=-1)

    def context(self, history: np.ndarray | None, actions: np.ndarray | None) -> np.ndarray | None:
        """(B, n_history*L [+ action_embed]) conditioning vector, without gradient caching."""
        parts = []
        if self.cfg.n_history:
            parts.append(np.asarray(history).reshape(len(history), -1))
        if self.action_encoder is not None:
            parts.append(self.action_encoder(actions).astype(np.float64))
        return np.concatenate(parts, axis=-1) if parts else None

    def fit_normalizer(self, history: np.ndarray, targets: np.ndarray, floor: float = 1e-3) -> None:
        """Standardize next-latent changes over a transition dataset."""
        if not self.cfg.n_history:
            return
        delta = np.asarray(targets, dtype=np.float64) - np.asarray(history)[:, -1]
        self.params["delta_mean"][...] = delta.mean(axis=0)
        self.params["delta_scale"][...] = np.maximum(delta.std(axis=0), floor)

    def to_flow(self, z_next: np.ndarray, history: np.ndarray | None) -> np.ndarray:
        """Next latent -> flow data space."""
        z_next = np.asarray(z_next, dtype=np.float64)
        if not self.cfg.n_history:
            return z_next
        return (z_next - np.asarray(history)[:, -1] - self.params["delta_mean"]) / self.params["delta_scale"]

    def from_flow(self, x: np.ndarray, history: np.ndarray | None) -> np.ndarray:
        if not self.cfg.n_history:
            return x
        return np.asarray(history)[:, -1] + self.params["delta_mean"] + x * self.params["delta_scale"]

    def velocity_at(self, x, t, d, ctx) -> np.ndarray:
        return self.velocity(self._inputs(np.asarray(x, dtype=np.float64), t, d, ctx)).astype(np.float64)


# --- training -------------------------------------------------------------------------


def shortcut_target(model: WorldModelNet, sample: FlowSample, ctx: np.ndarray | None) -> np.ndarray:
    """x1 - x0 where d == d_min, otherwise the mean of two teacher half-steps (no gradient)."""
    d = np.broadcast_to(sample.d, (len(sample.xt),))
    t = np.broadcast_to(sample.t, (len(sample.xt),))
    grid = model.grid
    bad = [x for x in np.unique(d) if not grid.is_admissible(float(x))]
    if bad:
        raise ValueError(f"step sizes {bad} are not on the grid")
    target = np.array(sample.v, dtype=np.float64, copy=True)
    big = d > grid.d_min
    if np.any(big):
        c = None if ctx is None else ctx[big]
        half = d[big] / 2.0
        xt = sample.xt[big]
        v1 = model.velocity_at(xt, t[big], half, c)
        x_mid = xt + v1 * half[:, None]
        v2 = model.velocity_at(x_mid, t[big] + half, half, c)
        target[big] = 0.5 * (v1 + v2)
    return target


@dataclass
class WMTrainState:
    model: WorldModelNet
    opt: AdamW


def wm_loss_and_grad(model: WorldModelNet, history, actions, x1, x0, t, d) -> float:
    """Weighted flow loss for a prepared batch; leaves gradients in the trainable nets."""
    x1 = np.asarray(x1, dtype=np.float64)
    n = len(x1)
    for m in model.trainable():
        m.zero_grad()
    sample = FlowSample.build(x0, x1, t, d)
    ctx_nograd = model.context(history, actions)
    target = shortcut_target(model, sample, ctx_nograd)

    parts = []
    if model.cfg.n_history:
        parts.append(np.asarray(history, dtype=np.float64).reshape(n, -1))
    if model.action_encoder is not None:
        parts.append(model.action_encoder.forward(actions).astype(np.float64))
    ctx = np.concatenate(parts, axis=-1) if parts else None
    pred = model.velocity.forward(model._inputs(sample.xt, t, d, ctx)).astype(np.float64)
    w = loss_weight(t)
    err = pred - target
    loss = float(np.mean(w * np.sum(err * err, axis=-1)))
    if not np.isfinite(loss):
        raise NonFiniteError("world model loss is not finite")
    g_in = model.velocity.backward(2.0 * w[:, None] * err / n)
    if model.action_encoder is not None:
        L = model.cfg.latent_dim
        start = L + model.cfg.n_history * L
        model.action_encoder.backward(g_in[:, start:start + model.cfg.action_embed])
    return loss


def wm_train_step(state: WMTrainState, history, actions, x1, rng: SeededRng) -> float:
    """One optimizer step on a batch of (context, next latent) pairs; returns the mean weighted loss."""
    x1 = np.asarray(x1, dtype=np.float64)
    if len(x1) == 0:
        raise ValueError("empty batch")
    model = state.model
    t, d = sample_training_pairs(rng, model.grid, len(x1))
    x0 = rng.normal(size=x1.shape)
    loss = wm_loss_and_grad(model, history, actions, model.to_flow(x1, history), x0, t, d)
    params, grads = {}, {}
    for name, m in model.children().items():
        if m is model.obs_encoder:
            continue
        for k, v in m.named_parameters(f"{name}."):
            params[k] = v
        for k, v in m.named_gradients(f"{name}."):
            grads[k] = v
    state.opt.step(params, grads)
    return loss


# --- sampling ---------------------------------------------------------------------------


def check_steps(steps: int, grid: StepGrid) -> None:
    if steps < 1 or steps > grid.k_max or steps & (steps - 1):
        raise ValueError(f"steps must be a power of two <= {grid.k_max}, got {steps}")


def sample_next_latent(model: WorldModelNet, ctx: np.ndarray | None, steps: int, rng: SeededRng, n: int | None = None) -> np.ndarray:
    """Euler integration from fresh noise with d = 1/steps; returns (B, L)."""
    check_steps(steps, model.grid)
    if n is None:
        n = 1 if ctx is None else len(ctx)
    x = rng.normal(size=(n, model.cfg.latent_dim))
    d = 1.0 / steps
    t = 0.0
    for _ in range(steps):
        x = x + model.velocity_at(x, t, d, ctx) * d
        t += d
    return x


def imagine_rollout(model: WorldModelNet, history: np.ndarray, trajs: np.ndarray, steps: int, rng: SeededRng) -> np.ndarray:
    """Autoregressive latent rollout of (B, 8, 3) trajectories from (B or 1, 4, L) history -> (B, 8, L)."""
    trajs = np.asarray(trajs, dtype=np.float64).reshape(-1, HORIZON, 3)
    b = len(trajs)
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 2:
        history = history[None]
    if history.shape[1] != model.cfg.n_history:
        raise ValueError(f"history must hold {model.cfg.n_history} frames")
    window = np.broadcast_to(history, (b,) + history.shape[1:]).copy()
    actions = local_actions(trajs)
    out = np.empty((b, HORIZON, model.cfg.latent_dim))
    for k in range(HORIZON):
        ctx = model.context(window, actions[:, k])
        z = model.from_flow(sample_next_latent(model, ctx, steps, rng), window)
        out[:, k] = z
        window = np.concatenate([window[:, 1:], z[:, None]], axis=1)
    return out


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| between two sample sets."""
    from scipy.spatial.distance import cdist

    return float(2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def distillation_residual(model: WorldModelNet, xt, t, d, ctx=None) -> np.ndarray:
    """Per-point ||phi(x, t, d) - (v1 + v2)/2|| for d > d_min."""
    sample = FlowSample.build(np.zeros_like(xt), np.zeros_like(xt), t, d)
    sample.xt = np.asarray(xt, dtype=np.float64)
    target = shortcut_target(model, sample, ctx)
    pred = model.velocity_at(xt, t, d, ctx)
    return np.linalg.norm(pred - target, axis=-1)
