"""Autoregressive dense reward model over history and imagined latents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import HORIZON, SeededRng
from .env import REWARD_DIMS, HorizonRewardTable
from .nn import AdamW, CrossAttentionBlock, DenseNet, Module, NonFiniteError, sigmoid
from .worldmodel import N_HISTORY, WorldModelNet, imagine_rollout

N_DIMS = len(REWARD_DIMS)
N_SLOTS = N_HISTORY + HORIZON
TRAJ_SCALE = np.array([1.0 / 20.0, 1.0 / 5.0, 1.0])


@dataclass(frozen=True)
class RewardModelConfig:
    latent_dim: int = 32
    token_dim: int = 8  # compressed latent width l
    width: int = 32  # D
    traj_hidden: int = 64
    head_hidden: int = 64


class RewardModel(Module):
    def __init__(self, cfg: RewardModelConfig, rng: SeededRng):
        super().__init__()
        if cfg.latent_dim % cfg.token_dim:
            raise ValueError("latent width must be a multiple of the compressed token width")
        self.cfg = cfg
        g = rng.spawn(0).gen
        D, l = cfg.width, cfg.token_dim
        self.params["compress_query"] = (g.normal(size=(1, l)) * 0.5).astype(np.float32)
        self.params["q_base"] = (g.normal(size=(N_DIMS, D)) * 0.5).astype(np.float32)
        self.params["step_emb"] = (g.normal(size=(HORIZON, D)) * 0.5).astype(np.float32)
        self.params["frame_pos"] = (g.normal(size=(N_SLOTS, D)) * 0.1).astype(np.float32)
        self.compressor = CrossAttentionBlock(l, l, l, rng.spawn(1), residual=False, out_proj=False)
        self.his_enc = DenseNet([l, D, D], ["relu", "identity"], rng.spawn(2))
        self.traj_mlp = DenseNet([HORIZON * 3, cfg.traj_hidden, D], ["relu", "identity"], rng.spawn(3))
        self.attn = CrossAttentionBlock(D, D, D, rng.spawn(4), residual=True, out_proj=True)
        self.head = DenseNet([D, cfg.head_hidden, 1], ["relu", "identity"], rng.spawn(5))
        self.zero_grad()
        self._cache = None

    def children(self):
        return {"compressor": self.compressor, "his_enc": self.his_enc, "traj_mlp": self.traj_mlp, "attn": self.attn, "head": self.head}

    # pieces ---------------------------------------------------------------------------
    def _chunks(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent width {z.shape[-1]} != {self.cfg.latent_dim}")
        l = self.cfg.token_dim
        return z.reshape(-1, self.cfg.latent_dim // l, l)

    def compress_latent(self, z: np.ndarray) -> np.ndarray:
        """(..., L) latents -> (..., l) tokens by one learned query attending over l-wide chunks."""
        z = np.asarray(z)
        lead = z.shape[:-1]
        chunks = self._chunks(z)
        q = np.broadcast_to(self.params["compress_query"], (len(chunks), 1, self.cfg.token_dim))
        return self.compressor(q, chunks)[:, 0].reshape(lead + (self.cfg.token_dim,))

    @staticmethod
    def prefix_input(trajs: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Flattened, scaled trajectory prefix with poses beyond horizon t zeroed."""
        trajs = np.asarray(trajs, dtype=np.float64).reshape(-1, HORIZON, 3)
        keep = np.arange(HORIZON)[None, :] < np.asarray(t).reshape(-1, 1)
        return (trajs * TRAJ_SCALE * keep[..., None]).reshape(len(trajs), -1)

    @staticmethod
    def slot_mask(t: np.ndarray) -> np.ndarray:
        return np.arange(N_SLOTS)[None, :] < (N_HISTORY + np.asarray(t).reshape(-1, 1))

    # forward / backward -----------------------------------------------------------------
    def _run(self, frames, trajs, t, keep):
        """frames (B, 12, L) with history in slots 0..3; horizon t reads only slots < 4 + t."""
        frames = np.asarray(frames)
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        if np.any((t < 1) | (t > HORIZON)):
            raise ValueError("horizon must lie in 1..8")
        b = len(frames)
        mask = self.slot_mask(t)
        # zero the unread slots so nothing downstream can depend on them
        frames = np.where(mask[..., None], frames, 0.0)
        chunks = self._chunks(frames)
        q_c = np.broadcast_to(self.params["compress_query"], (len(chunks), 1, self.cfg.token_dim))
        comp = (self.compressor.forward if keep else self.compressor)(q_c, chunks)[:, 0]
        comp = comp.reshape(b, N_SLOTS, self.cfg.token_dim)
        tokens = (self.his_enc.forward if keep else self.his_enc)(comp) + self.params["frame_pos"]
        c_dyn = (self.traj_mlp.forward if keep else self.traj_mlp)(self.prefix_input(trajs, t)) + self.params["step_emb"][t - 1]
        queries = self.params["q_base"][None] + c_dyn[:, None, :]
        attended = (self.attn.forward if keep else self.attn)(queries, tokens, mask)
        logits = (self.head.forward if keep else self.head)(attended)[..., 0]
        if keep:
            self._cache = (t, b)
        return logits.astype(np.float64)

    def logits(self, frames, trajs, t) -> np.ndarray:
        return self._run(frames, trajs, t, keep=False)

    def forward(self, frames, trajs, t) -> np.ndarray:
        return self._run(frames, trajs, t, keep=True)

    def backward(self, g_logits: np.ndarray) -> None:
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward()")
        t, b = self._cache
        self._cache = None
        g_att = self.head.backward(np.asarray(g_logits)[..., None])
        g_q, g_tokens = self.attn.backward(g_att)
        self.grads["q_base"] += g_q.sum(axis=0)
        g_c = g_q.sum(axis=1)
        np.add.at(self.grads["step_emb"], t - 1, g_c)
        self.traj_mlp.backward(g_c)
        self.grads["frame_pos"] += g_tokens.sum(axis=0)
        g_comp = self.his_enc.backward(g_tokens)
        g_qc, _ = self.compressor.backward(g_comp.reshape(-1, 1, self.cfg.token_dim))
        self.grads["compress_query"] += g_qc.sum(axis=0)

    def predict_rewards(self, history, imagined, traj_prefix, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Logits and scores (8,) at horizon t from 4 history latents and exactly t imagined latents."""
        history = np.asarray(history)
        imagined = np.asarray(imagined).reshape(-1, self.cfg.latent_dim)
        if history.shape != (N_HISTORY, self.cfg.latent_dim):
            raise ValueError("history must be 4 latents")
        if len(imagined) != t:
            raise ValueError(f"horizon {t} needs {t} imagined latents, got {len(imagined)}")
        frames = np.zeros((1, N_SLOTS, self.cfg.latent_dim))
        frames[0, :N_HISTORY] = history
        frames[0, N_HISTORY:N_HISTORY + t] = imagined
        traj = np.zeros((HORIZON, 3))
        prefix = np.asarray(traj_prefix, dtype=np.float64).reshape(-1, 3)
        traj[: min(len(prefix), HORIZON)] = prefix[:HORIZON]
        logit = self.logits(frames, traj[None], np.array([t]))[0]
        return logit, sigmoid(logit)


def stack_frames(history: np.ndarray, imagined: np.ndarray) -> np.ndarray:
    """(B or 1, 4, L) history + (B, 8, L) imagined -> (B, 12, L)."""
    imagined = np.asarray(imagined)
    history = np.broadcast_to(np.asarray(history), (len(imagined), N_HISTORY, imagined.shape[-1]))
    return np.concatenate([history, imagined], axis=1)


# --- loss -----------------------------------------------------------------------------


def bce_with_logits(logits, labels) -> np.ndarray:
    """Elementwise numerically stable binary cross-entropy on logits (float64)."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))


def weighted_bce(logits, labels, t, dim_weights=None, horizon_weights=None) -> tuple[float, np.ndarray]:
    """Batch mean of sum_k w_k gamma(t) BCE(logit_k, label_k) and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if np.any(labels < 0) or np.any(labels > 1):
        raise ValueError("labels must lie in [0, 1]")
    w = np.ones(N_DIMS) if dim_weights is None else np.asarray(dim_weights, dtype=np.float64)
    gamma = np.ones(HORIZON) if horizon_weights is None else np.asarray(horizon_weights, dtype=np.float64)
    scale = w[None, :] * gamma[np.asarray(t, dtype=np.int64) - 1][:, None]
    b = len(logits)
    loss = float(np.sum(scale * bce_with_logits(logits, labels)) / b)
    grad = scale * (sigmoid(logits) - labels) / b
    return loss, grad


@dataclass
class RMTrainState:
    model: RewardModel
    opt: AdamW
    dim_weights: np.ndarray | None = None
    horizon_weights: np.ndarray | None = None


def rm_train_step(state: RMTrainState, frames, trajs, t, labels) -> float:
    """One optimizer step on (B, 12, L) frames, (B, 8, 3) trajectories, horizons and (B, 8) labels."""
    model = state.model
    model.zero_grad()
    logits = model.forward(frames, trajs, t)
    loss, grad = weighted_bce(logits, labels, t, state.dim_weights, state.horizon_weights)
    if not np.isfinite(loss):
        raise NonFiniteError("reward model loss is not finite")
    model.backward(grad)
    state.opt.step(model.parameter_dict(), model.gradient_dict())
    return loss


def predict_tables(model: RewardModel, history, imagined, trajs) -> np.ndarray:
    """Scores at all 8 horizons for a batch: (B, 8 horizons, 8 dims)."""
    frames = stack_frames(history, imagined)
    b = len(frames)
    t = np.repeat(np.arange(1, HORIZON + 1)[None], b, axis=0).ravel()
    logits = model.logits(np.repeat(frames, HORIZON, axis=0), np.repeat(np.asarray(trajs), HORIZON, axis=0), t)
    return sigmoid(logits).reshape(b, HORIZON, N_DIMS)


def score_trajectories(wm: WorldModelNet, rm: RewardModel, history, trajs, steps: int, rng: SeededRng) -> np.ndarray:
    """Imagine once per trajectory, then decode every horizon: (B, 8, 8) predicted tables."""
    imagined = imagine_rollout(wm, history, trajs, steps, rng)
    return predict_tables(rm, history, imagined, trajs)


def score_trajectory(wm: WorldModelNet, rm: RewardModel, history, traj, steps: int, rng: SeededRng) -> HorizonRewardTable:
    arr = traj.array if hasattr(traj, "array") else np.asarray(traj)
    return HorizonRewardTable(score_trajectories(wm, rm, history, arr[None], steps, rng)[0])
