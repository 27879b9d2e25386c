"""Spatially constrained trajectory vocabulary: library generation, end-state filter, stratified pick."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import HORIZON, V_MAX, SeededRng, Trajectory, read_trajectories, trajectories_to_array, wrap_angle_diff, write_trajectories
from .env import MAX_YAW_RATE, rollout_batch

log = logging.getLogger(__name__)

X_THRESH = 10.0
Y_THRESH = 5.0
THETA_THRESH = math.radians(20.0)


@dataclass(frozen=True)
class LibraryConfig:
    v_max: float = V_MAX
    max_pieces: int = 3
    yaw_bias: float = 0.35
    yaw_noise: float = 0.35
    yaw_smoothing: float = 0.6
    dedup_xy: float = 0.5
    dedup_theta: float = math.radians(5.0)


def _draw_controls(rng: SeededRng, n: int, cfg: LibraryConfig) -> np.ndarray:
    # piecewise-constant speeds: up to max_pieces levels with random switch steps
    levels = rng.uniform(0.0, cfg.v_max, size=(n, cfg.max_pieces))
    n_pieces = rng.integers(1, cfg.max_pieces + 1, size=n)
    cuts = np.sort(rng.integers(1, HORIZON, size=(n, cfg.max_pieces - 1)), axis=1)
    steps = np.arange(HORIZON)
    piece = np.sum(steps[None, :, None] >= cuts[:, None, :], axis=-1)
    piece = np.minimum(piece, n_pieces[:, None] - 1)
    speed = np.take_along_axis(levels, piece, axis=1)
    # yaw rate: constant bias plus exponentially smoothed white noise
    noise = rng.normal(size=(n, HORIZON)) * cfg.yaw_noise
    yaw = np.empty((n, HORIZON))
    acc = np.zeros(n)
    for k in range(HORIZON):
        acc = cfg.yaw_smoothing * acc + (1.0 - cfg.yaw_smoothing) * noise[:, k]
        yaw[:, k] = acc
    yaw += rng.uniform(-cfg.yaw_bias, cfg.yaw_bias, size=(n, 1))
    yaw = np.clip(yaw, -MAX_YAW_RATE, MAX_YAW_RATE)
    return np.stack([speed, yaw], axis=-1)


def _end_key(arr: np.ndarray, cfg: LibraryConfig) -> np.ndarray:
    end = arr[:, -1]
    return np.stack(
        [np.round(end[:, 0] / cfg.dedup_xy), np.round(end[:, 1] / cfg.dedup_xy), np.round(end[:, 2] / cfg.dedup_theta)], axis=1
    ).astype(np.int64)


def generate_library_array(rng: SeededRng, size: int = 8192, cfg: LibraryConfig = LibraryConfig(), max_rounds: int = 50) -> np.ndarray:
    """(size, 8, 3) kinematically feasible trajectories with distinct end-state grid cells."""
    if size < 1:
        raise ValueError("library size must be >= 1")
    seen: set[tuple[int, int, int]] = set()
    keep: list[np.ndarray] = []
    total = 0
    for _ in range(max_rounds):
        batch = rollout_batch(_draw_controls(rng, max(2 * (size - total), 16), cfg))
        for row, key in zip(batch, map(tuple, _end_key(batch, cfg))):
            if key in seen:
                continue
            seen.add(key)
            keep.append(row)
            total += 1
            if total == size:
                return np.stack(keep)
    log.warning("library generation stopped at %d unique end states (asked for %d)", total, size)
    return np.stack(keep)


def generate_library(rng: SeededRng, size: int = 8192, cfg: LibraryConfig = LibraryConfig()) -> list[Trajectory]:
    return [Trajectory(a, v_max=cfg.v_max) for a in generate_library_array(rng, size, cfg)]


def end_deviation(library: np.ndarray, anchor: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(|dx|, |dy|, dtheta) of library end states against the anchor's end state."""
    lib_end = np.asarray(library)[:, -1]
    a_end = np.asarray(anchor)[-1]
    return (
        np.abs(lib_end[:, 0] - a_end[0]),
        np.abs(lib_end[:, 1] - a_end[1]),
        np.asarray(wrap_angle_diff(lib_end[:, 2], a_end[2])).reshape(-1),
    )


def end_state_mask(library, anchor, x_thresh=X_THRESH, y_thresh=Y_THRESH, theta_thresh=THETA_THRESH) -> np.ndarray:
    if min(x_thresh, y_thresh, theta_thresh) <= 0:
        raise ValueError("thresholds must be positive")
    lib = trajectories_to_array(library) if isinstance(library, list) else np.asarray(library)
    anc = anchor.array if isinstance(anchor, Trajectory) else np.asarray(anchor)
    if len(lib) == 0:
        return np.zeros(0, dtype=bool)
    dx, dy, dth = end_deviation(lib, anc)
    return (dx <= x_thresh) & (dy <= y_thresh) & (dth <= theta_thresh)


def filter_by_end_state(library, anchor, x_thresh=X_THRESH, y_thresh=Y_THRESH, theta_thresh=THETA_THRESH):
    """Keep entries whose end state lies within the thresholds of the anchor's end state."""
    mask = end_state_mask(library, anchor, x_thresh, y_thresh, theta_thresh)
    if isinstance(library, list):
        return [t for t, keep in zip(library, mask) if keep]
    return np.asarray(library)[mask]


def stratified_indices(n: int, k: int) -> np.ndarray:
    """round(i (n-1)/(k-1)) for i < k, rounding halves up; everything when n <= k."""
    if n <= k:
        return np.arange(n)
    if k == 1:
        return np.zeros(1, dtype=np.int64)
    return np.floor(np.arange(k) * (n - 1) / (k - 1) + 0.5).astype(np.int64)


@dataclass
class TrajectoryVocabulary:
    entries: np.ndarray
    library_indices: np.ndarray
    provenance: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(e) for e in self.entries]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        write_trajectories(path, self.trajectories(), comments=[f"vocabulary K={len(self)}"])
        side = dict(self.provenance, library_indices=[int(i) for i in self.library_indices], warnings=self.warnings)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryVocabulary":
        path = Path(path)
        entries = trajectories_to_array(read_trajectories(path))
        side_path = path.with_suffix(path.suffix + ".json")
        side = json.loads(side_path.read_text()) if side_path.exists() else {}
        idx = np.array(side.pop("library_indices", list(range(len(entries)))), dtype=np.int64)
        warnings = side.pop("warnings", [])
        return cls(entries, idx, side, warnings)


def stratified_select(filtered, anchor, k: int = 256, library_indices=None) -> TrajectoryVocabulary:
    """Sort by |dy| (then |dx|, then library index) and take k equally spaced entries."""
    arr = trajectories_to_array(filtered) if isinstance(filtered, list) else np.asarray(filtered)
    if len(arr) == 0:
        raise ValueError("cannot select from an empty candidate set")
    anc = anchor.array if isinstance(anchor, Trajectory) else np.asarray(anchor)
    lib_idx = np.arange(len(arr)) if library_indices is None else np.asarray(library_indices)
    dx, dy, _ = end_deviation(arr, anc)
    order = np.lexsort((lib_idx, dx, dy))
    pick = order[stratified_indices(len(arr), k)]
    warnings = []
    if len(arr) < k:
        msg = f"only {len(arr)} candidates survived filtering (K={k})"
        log.warning(msg)
        warnings.append(msg)
    return TrajectoryVocabulary(arr[pick], lib_idx[pick], {"k": k, "filtered_size": int(len(arr))}, warnings)


def build_vocabulary(
    rng: SeededRng,
    anchor,
    k: int = 256,
    library_size: int = 8192,
    x_thresh: float = X_THRESH,
    y_thresh: float = Y_THRESH,
    theta_thresh: float = THETA_THRESH,
    cfg: LibraryConfig = LibraryConfig(),
    anchor_id: int | None = None,
    library: np.ndarray | None = None,
) -> TrajectoryVocabulary:
    lib = generate_library_array(rng, library_size, cfg) if library is None else library
    mask = end_state_mask(lib, anchor, x_thresh, y_thresh, theta_thresh)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        # the anchor itself always passes its own filter
        anc = anchor.array if isinstance(anchor, Trajectory) else np.asarray(anchor)
        vocab = TrajectoryVocabulary(anc[None].copy(), np.array([-1]), {"k": k, "filtered_size": 0}, ["no library entry survived; vocabulary is the anchor"])
    else:
        vocab = stratified_select(lib[idx], anchor, k, library_indices=idx)
    vocab.provenance.update(
        source_size=int(len(lib)),
        x_thresh=x_thresh,
        y_thresh=y_thresh,
        theta_thresh_deg=math.degrees(theta_thresh),
        anchor_id=anchor_id,
        seed=rng.seed,
        stream=rng.stream,
    )
    return vocab
