"""Training and evaluation stages shared by the command line and the test suite."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .config import RunConfig
from .core import HORIZON, SeededRng, project_feasible
from .data import SceneRecord, difficulty_for, label_vocabulary, make_scene_record
from .env import REWARD_DIMS, SAFETY_DIMS, simulate_rewards_batch
from .nn import AdamW, NonFiniteError
from .rewardmodel import RewardModel, RewardModelConfig, RMTrainState, predict_tables, rm_train_step, stack_frames
from .rl import PolicyBatch, PolicyHead, RLState, bc_train, rl_train_step
from .worldmodel import (
    FEATURE_SCALE,
    N_FEATURES,
    N_HISTORY,
    WMTrainState,
    WorldModelConfig,
    WorldModelNet,
    history_poses,
    imagine_rollout,
    local_actions,
    observation_features,
    sample_next_latent,
    wm_train_step,
)

log = logging.getLogger(__name__)

# rng stream ids, one per stage
STREAM_DATA = 1
STREAM_WM = 2
STREAM_LABEL = 3
STREAM_RM = 4
STREAM_POLICY = 5
STREAM_RL = 6
STREAM_EVAL = 7


# --- data -------------------------------------------------------------------------------


def _map(fn, items, workers: int) -> list:
    """Ordered map; every item is seeded independently, so the worker count never changes results."""
    if workers <= 1 or len(items) < 2:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*items)))


EVAL_MIX = ("static", "mixed", "dynamic")


def scene_plan(cfg: RunConfig) -> list[tuple[int, str, str]]:
    """(scene_id, difficulty, split) for every scene of a run."""
    plan = [(i, difficulty_for(i), "train") for i in range(cfg.n_train)]
    plan += [(cfg.n_train + j, EVAL_MIX[j % 3], "eval") for j in range(cfg.n_eval)]
    return plan


def generate_records(cfg: RunConfig) -> tuple[list[SceneRecord], list[SceneRecord]]:
    """Train scenes follow the difficulty mix; eval scenes always contain obstacles."""
    plan = scene_plan(cfg)
    items = [(cfg.seed, sid, diff, cfg.vocab_k, cfg.library_size, cfg.x_thresh, cfg.y_thresh, cfg.theta_thresh) for sid, diff, _ in plan]
    recs = _map(make_scene_record, items, cfg.workers)
    return recs[: cfg.n_train], recs[cfg.n_train:]


# --- world model ------------------------------------------------------------------------


def make_world_model(cfg: RunConfig) -> WorldModelNet:
    wcfg = WorldModelConfig(latent_dim=cfg.latent_dim, hidden=cfg.wm_hidden, k_max=cfg.k_max)
    return WorldModelNet(wcfg, SeededRng(cfg.seed, STREAM_WM).spawn(0))


def transition_dataset(wm: WorldModelNet, records: list[SceneRecord], per_scene: int, rng: SeededRng):
    """(windows (N, 4, L), actions (N, 3), next latents (N, L)) from true latent sequences.

    Each scene contributes its anchor and ``per_scene`` vocabulary entries.
    """
    windows, actions, targets = [], [], []
    for rec in records:
        entries = rec.vocab.entries
        pick = rng.choice(len(entries), size=min(per_scene, len(entries)), replace=False)
        trajs = np.concatenate([rec.anchor.array[None], entries[np.sort(pick)]], axis=0)
        hist = wm.history_latents(rec.scene)
        seq = np.concatenate([np.broadcast_to(hist, (len(trajs),) + hist.shape), wm.trajectory_latents(rec.scene, trajs)], axis=1)
        acts = local_actions(trajs)
        for k in range(HORIZON):
            windows.append(seq[:, k:k + N_HISTORY])
            actions.append(acts[:, k])
            targets.append(seq[:, k + N_HISTORY])
    return np.concatenate(windows), np.concatenate(actions), np.concatenate(targets)


def train_world_model(wm: WorldModelNet, data, cfg: RunConfig, rng: SeededRng, steps: int | None = None) -> list[float]:
    windows, actions, targets = data
    wm.fit_normalizer(windows, targets)
    state = WMTrainState(wm, AdamW(lr=cfg.wm_lr))
    curve = []
    n = len(targets)
    for _ in range(cfg.wm_train_steps if steps is None else steps):
        idx = rng.integers(0, n, size=min(cfg.wm_batch, n))
        curve.append(wm_train_step(state, windows[idx], actions[idx], targets[idx], rng))
    return curve


# --- reward model -----------------------------------------------------------------------


@dataclass
class LabelSet:
    """Imagined frames, trajectories and oracle tables for labeled (scene, trajectory) pairs."""

    frames: np.ndarray  # (N, 12, L) float32
    trajs: np.ndarray  # (N, 8, 3)
    tables: np.ndarray  # (N, 8, 8)
    scene_ids: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.trajs)

    def subset(self, idx) -> "LabelSet":
        return LabelSet(self.frames[idx], self.trajs[idx], self.tables[idx], self.scene_ids[idx])


def oracle_labels(records: list[SceneRecord], workers: int = 1) -> list[np.ndarray]:
    return _map(label_vocabulary, [(r,) for r in records], workers)


def label_subset(data: LabelSet, fraction: float, rng: SeededRng) -> LabelSet:
    """A uniformly drawn fraction of the labeled (scene, trajectory) pairs, in dataset order."""
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    if fraction == 1:
        return data
    n = max(1, int(round(fraction * len(data))))
    return data.subset(np.sort(rng.choice(len(data), size=n, replace=False)))


def imagined_label_set(wm: WorldModelNet, records: list[SceneRecord], labels: list[np.ndarray], steps: int, rng: SeededRng) -> LabelSet:
    frames, trajs, tables, ids = [], [], [], []
    for rec, tab in zip(records, labels):
        entries = rec.vocab.entries
        hist = wm.history_latents(rec.scene)
        imagined = imagine_rollout(wm, hist, entries, steps, rng)
        frames.append(stack_frames(hist[None], imagined).astype(np.float32))
        trajs.append(entries)
        tables.append(tab)
        ids.append(np.full(len(entries), rec.scene_id))
    return LabelSet(np.concatenate(frames), np.concatenate(trajs), np.concatenate(tables), np.concatenate(ids))


def make_reward_model(cfg: RunConfig) -> RewardModel:
    rcfg = RewardModelConfig(latent_dim=cfg.latent_dim, token_dim=cfg.rm_token_dim, width=cfg.rm_width)
    return RewardModel(rcfg, SeededRng(cfg.seed, STREAM_RM).spawn(0))


def train_reward_model(rm: RewardModel, data: LabelSet, cfg: RunConfig, rng: SeededRng, steps: int | None = None) -> list[float]:
    state = RMTrainState(rm, AdamW(lr=cfg.rm_lr), np.array(cfg.rm_dim_weights), np.array(cfg.rm_horizon_weights))
    n = len(data)
    total = cfg.rm_train_steps if steps is None else steps
    curve = []
    for step in range(total):
        # cosine decay to a tenth of the base rate
        state.opt.lr = cfg.rm_lr * (0.55 + 0.45 * np.cos(np.pi * step / max(total, 1)))
        idx = rng.integers(0, n, size=min(cfg.rm_batch, n))
        t = rng.integers(1, HORIZON + 1, size=len(idx))
        labels = data.tables[idx, t - 1]
        curve.append(rm_train_step(state, data.frames[idx], data.trajs[idx], t, labels))
    return curve


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic; NaN when a class is missing."""
    labels = np.asarray(labels) > 0.5
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_reward_model(rm: RewardModel, data: LabelSet, chunk: int = 4096) -> dict:
    """Per-dimension AUC pooled over all horizons, plus ep mean absolute error.

    AUC treats the positive class as "unsafe" (label 0) scored by 1 - prediction,
    which is the same number as the AUC of prediction vs label.
    """
    preds = np.concatenate([predict_tables(rm, data.frames[i:i + chunk, :N_HISTORY], data.frames[i:i + chunk, N_HISTORY:], data.trajs[i:i + chunk]) for i in range(0, len(data), chunk)])
    out = {"auc": {}, "negatives": {}}
    for k, name in enumerate(REWARD_DIMS):
        p, y = preds[..., k].ravel(), data.tables[..., k].ravel()
        if name == "ep":
            out["ep_mae"] = float(np.mean(np.abs(p - y)))
            continue
        out["auc"][name] = auc(p, y)
        out["negatives"][name] = int(np.sum(y < 0.5))
    return out


# --- policy -----------------------------------------------------------------------------


def make_policy(cfg: RunConfig) -> PolicyHead:
    return PolicyHead(N_FEATURES, cfg.latent_dim, N_HISTORY, SeededRng(cfg.seed, STREAM_POLICY).spawn(0), hidden=cfg.policy_hidden, degree=cfg.policy_degree)


def policy_batch(wm: WorldModelNet, records: list[SceneRecord]) -> PolicyBatch:
    feats, hist = [], []
    for rec in records:
        poses, speeds, times = history_poses(rec.scene)
        feats.append(observation_features(rec.scene, poses[-1:], speeds[-1:], times[-1:])[0])
        hist.append(wm.history_latents(rec.scene))
    return PolicyBatch(
        np.stack(feats), np.stack(hist), np.stack([r.anchor.array for r in records]), [r.vocab.entries for r in records]
    )


def pretrain_policy(policy: PolicyHead, batch: PolicyBatch, cfg: RunConfig) -> list[float]:
    return bc_train(policy, batch, FEATURE_SCALE, cfg.bc_epochs, SeededRng(cfg.seed, STREAM_POLICY).spawn(1), lr=cfg.bc_lr)


def train_policy_rl(policy: PolicyHead, wm: WorldModelNet, rm: RewardModel, batch: PolicyBatch, cfg: RunConfig, rng: SeededRng | None = None, steps: int | None = None, callback=None) -> list[dict]:
    """GRPO in imagination; the reference policy is a frozen copy taken at the start."""
    rng = rng or SeededRng(cfg.seed, STREAM_RL)
    ref = make_policy(cfg)
    ref.copy_from(policy)
    rcfg = cfg.rl_config()
    state = RLState(policy, ref, AdamW(lr=rcfg.lr), rcfg, FEATURE_SCALE)
    n = len(batch.feats)
    history = []
    for step in range(cfg.rl_train_steps if steps is None else steps):
        idx = np.sort(rng.choice(n, size=min(rcfg.batch_scenes, n), replace=False))
        t0 = time.perf_counter()
        rec = rl_train_step(state, wm, rm, batch.subset(idx), rng)
        rec["step"] = step
        rec["seconds"] = time.perf_counter() - t0
        history.append(rec)
        if callback is not None:
            callback(rec)
    return history


def policy_trajectories(policy: PolicyHead, batch: PolicyBatch) -> np.ndarray:
    mean = policy.mean(batch.feats, batch.hist, FEATURE_SCALE)
    if not np.all(np.isfinite(mean)):
        raise NonFiniteError("policy produced a non-finite trajectory")
    return np.stack([project_feasible(m) for m in mean])


def evaluate_trajectories(records: list[SceneRecord], trajs: np.ndarray, rcfg) -> dict:
    """Closed-loop oracle scores of one trajectory per scene."""
    tables = np.stack([simulate_rewards_batch(r.scene, t[None])[0] for r, t in zip(records, trajs)])
    final = rcfg.final_reward(tables)
    h8 = tables[:, -1]
    return {
        "n_scenes": len(records),
        "dim_means": {name: float(np.mean(h8[:, k])) for k, name in enumerate(REWARD_DIMS)},
        "collision_rate": float(1.0 - np.mean(h8[:, 0])),
        "all_safe_rate": float(np.mean(np.all(h8[:, :len(SAFETY_DIMS)] >= 0.5, axis=-1))),
        "fused_reward": float(np.mean(final)),
    }


def evaluate_policy(policy: PolicyHead, wm: WorldModelNet, records: list[SceneRecord], cfg: RunConfig) -> dict:
    batch = policy_batch(wm, records)
    return evaluate_trajectories(records, policy_trajectories(policy, batch), cfg.rl_config())


def imagination_latency(wm: WorldModelNet, steps_list=(1, 4, 16), frames: int = 256, repeats: int = 3, seed: int = 0) -> dict:
    """Best-of-repeats wall-clock seconds per imagined frame for each sampling step count."""
    rng = SeededRng(seed, STREAM_EVAL)
    hist = rng.normal(size=(frames, N_HISTORY, wm.cfg.latent_dim))
    acts = rng.normal(size=(frames, wm.cfg.action_dim))
    ctx = wm.context(hist, acts)
    out = {}
    for steps in steps_list:
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            sample_next_latent(wm, ctx, steps, rng)
            best = min(best, time.perf_counter() - t0)
        out[str(steps)] = best / frames
    return out


