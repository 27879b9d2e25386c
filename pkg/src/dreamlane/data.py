"""Scene datasets: oracle-safe anchor trajectories, per-scene vocabularies and labels."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import DT, HORIZON, SeededRng, Trajectory
from .env import Difficulty, OracleConfig, Scene, generate_scene, is_all_safe, project_to_centerline, simulate_rewards_batch
from .rl import dense_final_reward
from .vocab import THETA_THRESH, X_THRESH, Y_THRESH, LibraryConfig, TrajectoryVocabulary, build_vocabulary

log = logging.getLogger(__name__)


class AnchorSearchError(RuntimeError):
    pass


def _lane_following_rollout(scene: Scene, target_lat, target_speed, max_accel, gain_lat, gain_head):
    """Closed-loop proposals tracking a lateral offset and speed; (N, 8, 3)."""
    n = len(target_lat)
    pose = np.zeros((n, 3))
    speed = np.full(n, scene.ego_speed)
    out = np.empty((n, HORIZON, 3))
    for k in range(HORIZON):
        speed = speed + np.clip(target_speed[:, k] - speed, -max_accel * DT, max_accel * DT)
        speed = np.maximum(speed, 0.0)
        # aim half a step ahead so the heading command anticipates the curve
        look = pose.copy()
        look[:, 0] += np.cos(pose[:, 2]) * speed * DT * 0.5
        look[:, 1] += np.sin(pose[:, 2]) * speed * DT * 0.5
        _, lat, tangent = project_to_centerline(scene.centerline, look[:, :2])
        head_err = np.mod(pose[:, 2] - tangent + math.pi, 2 * math.pi) - math.pi
        omega = -gain_head * head_err - gain_lat * (lat - target_lat[:, k]) + scene.curvature * speed
        omega = np.clip(omega, -1.0, 1.0)
        pose = pose.copy()
        pose[:, 2] = pose[:, 2] + omega * DT
        pose[:, 0] += speed * np.cos(pose[:, 2]) * DT
        pose[:, 1] += speed * np.sin(pose[:, 2]) * DT
        out[:, k] = pose
    out[..., 2] = np.mod(out[..., 2] + math.pi, 2 * math.pi) - math.pi
    return out


def propose_controls(scene: Scene, rng: SeededRng, n: int) -> np.ndarray:
    lat_end = rng.uniform(-1.1, 1.1, size=n)
    switch = rng.integers(0, HORIZON, size=n)
    steps = np.arange(HORIZON)
    target_lat = np.where(steps[None] >= switch[:, None], lat_end[:, None], 0.0)
    # some proposals return to the centre after the manoeuvre
    back = rng.uniform(size=n) < 0.3
    ret = np.minimum(switch + rng.integers(2, 5, size=n), HORIZON)
    target_lat = np.where(back[:, None] & (steps[None] >= ret[:, None]), 0.0, target_lat)
    speed_frac = rng.uniform(0.0, 1.05, size=n)
    speed_frac = np.where(rng.uniform(size=n) < 0.5, np.minimum(1.0, speed_frac + 0.5), speed_frac)
    stop_at = rng.integers(0, HORIZON + 4, size=n)
    target_speed = np.where(steps[None] >= stop_at[:, None], 0.0, speed_frac[:, None] * scene.speed_limit)
    max_accel = rng.uniform(2.0, 4.0, size=(n, 1))
    gain_lat = rng.uniform(0.3, 0.8, size=n)
    gain_head = rng.uniform(1.0, 1.8, size=n)
    return _lane_following_rollout(scene, target_lat, target_speed, max_accel[:, 0], gain_lat, gain_head)


def find_anchor(scene: Scene, rng: SeededRng, max_attempts: int = 10_000, batch: int = 512, oracle: OracleConfig = OracleConfig()):
    """Best fused-reward proposal among those the oracle rates safe at every horizon.

    Proposals are drawn in batches; the search stops at the first batch that holds
    a safe proposal. Returns (Trajectory, oracle table).
    """
    tried = 0
    while tried < max_attempts:
        n = min(batch, max_attempts - tried)
        props = propose_controls(scene, rng, n)
        tried += n
        valid = np.all(np.hypot(*np.moveaxis(np.diff(np.concatenate([np.zeros((n, 1, 2)), props[..., :2]], axis=1), axis=1), -1, 0)) <= 15.0 * DT, axis=1)
        labels = simulate_rewards_batch(scene, props, oracle)
        ok = is_all_safe(labels) & valid
        if np.any(ok):
            score = np.where(ok, dense_final_reward(labels), -np.inf)
            best = int(np.argmax(score))
            return Trajectory(props[best]), labels[best]
    raise AnchorSearchError(f"no oracle-safe anchor after {tried} proposals")


@dataclass
class SceneRecord:
    scene_id: int
    scene: Scene
    anchor: Trajectory
    anchor_table: np.ndarray
    vocab: TrajectoryVocabulary
    difficulty: str


def difficulty_for(idx: int, mix: tuple[str, ...] = ("static", "mixed", "dynamic", "static", "mixed", "empty")) -> str:
    return mix[idx % len(mix)]


def make_scene_record(
    seed: int,
    scene_id: int,
    difficulty: str | None = None,
    k: int = 256,
    library_size: int = 8192,
    x_thresh: float = X_THRESH,
    y_thresh: float = Y_THRESH,
    theta_thresh: float = THETA_THRESH,
    lib_cfg: LibraryConfig = LibraryConfig(),
    oracle: OracleConfig = OracleConfig(),
    max_regen: int = 20,
) -> SceneRecord:
    difficulty = difficulty or difficulty_for(scene_id)
    root = SeededRng(seed, 1000 + scene_id)
    for attempt in range(max_regen):
        scene = generate_scene(root.spawn(2 * attempt), Difficulty(difficulty))
        try:
            anchor, table = find_anchor(scene, root.spawn(2 * attempt + 1), oracle=oracle)
        except AnchorSearchError:
            log.info("scene %d attempt %d: no safe anchor, regenerating", scene_id, attempt)
            continue
        vocab = build_vocabulary(
            root.spawn(10_000), anchor, k=k, library_size=library_size, x_thresh=x_thresh, y_thresh=y_thresh,
            theta_thresh=theta_thresh, cfg=lib_cfg, anchor_id=scene_id,
        )
        return SceneRecord(scene_id, scene, anchor, table, vocab, difficulty)
    raise AnchorSearchError(f"scene {scene_id}: no safe anchor after {max_regen} regenerations")


def label_vocabulary(record: SceneRecord, oracle: OracleConfig = OracleConfig()) -> np.ndarray:
    """(K, 8, 8) oracle tables for every vocabulary entry of a scene."""
    return simulate_rewards_batch(record.scene, record.vocab.entries, oracle)
