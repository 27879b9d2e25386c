"""Command-line driver: one subcommand per pipeline stage, all artifacts under one output directory.

Layout of ``--out`` (default: the config's ``out_dir``)::

    config.yaml              resolved configuration
    manifest.json            scene ids, splits and difficulties
    scenes/ anchors/ vocab/  per-scene text files
    labels/                  per-scene oracle label files
    checkpoints/             DLNN checkpoints
    metrics/                 versioned JSON reports (deterministic)
    curves/                  CSV (step, value) series
    logs/                    JSON training logs (deterministic)
    timing/                  wall-clock measurements (the only run-to-run varying files)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import ConfigError, RunConfig, dump_config, load_config
from .core import SeededRng, read_trajectories, write_trajectories
from .data import SceneRecord
from .env import read_labels, read_scene, simulate_rewards_batch, write_labels, write_scene
from .nn import load_checkpoint, save_checkpoint
from .vocab import TrajectoryVocabulary

log = logging.getLogger("dreamlane")

SCHEMA = "dreamlane.metrics/1"
COMMANDS = ("gen-data", "train-wm", "label", "train-rm", "train-rl", "eval")


class StageError(RuntimeError):
    pass


# --- artifact io ------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, (float, np.floating)):
        return None if np.isnan(obj) else float(obj)
    return obj


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")


def _write_metrics(out: Path, name: str, cfg: RunConfig, body: dict) -> Path:
    path = out / "metrics" / f"{name}.json"
    _dump_json(path, {"schema": SCHEMA, "stage": name, "seed": cfg.seed, **body})
    return path


def _write_curve(out: Path, name: str, columns: dict[str, list]) -> None:
    path = out / "curves" / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *names])
        for i, row in enumerate(zip(*columns.values())):
            w.writerow([i, *(repr(float(v)) for v in row)])


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}")
    return path


def _save_model(path: Path, module, meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, module.parameter_dict(), meta)


def _load_model(path: Path, module, what: str):
    values, _ = load_checkpoint(_require(path, what))
    module.load_parameters(values)
    return module


def load_records(out: Path) -> tuple[list[SceneRecord], list[SceneRecord]]:
    manifest = json.loads(_require(out / "manifest.json", "scene manifest (run gen-data)").read_text())
    split = {"train": [], "eval": []}
    for item in manifest["scenes"]:
        sid = item["id"]
        scene = read_scene(_require(out / "scenes" / f"scene_{sid:05d}.txt", "scene file"))
        anchor = read_trajectories(_require(out / "anchors" / f"anchor_{sid:05d}.txt", "anchor file"))[0]
        vocab = TrajectoryVocabulary.load(_require(out / "vocab" / f"vocab_{sid:05d}.txt", "vocabulary file"))
        table = simulate_rewards_batch(scene, anchor.array[None])[0]
        split[item["split"]].append(SceneRecord(sid, scene, anchor, table, vocab, item["difficulty"]))
    return split["train"], split["eval"]


def _load_wm(out: Path, cfg: RunConfig):
    return _load_model(out / "checkpoints" / "wm.dlnn", P.make_world_model(cfg), "world model checkpoint (run train-wm)")


def _load_labels(out: Path, records: list[SceneRecord]) -> list[np.ndarray]:
    tables = []
    for rec in records:
        rows = read_labels(_require(out / "labels" / f"labels_{rec.scene_id:05d}.txt", "label file (run label)"))
        if len(rows) != len(rec.vocab) or any(sid != rec.scene_id or tid != i for i, (sid, tid, _) in enumerate(rows)):
            raise StageError(f"label file for scene {rec.scene_id} does not match its vocabulary")
        tables.append(np.stack([t for _, _, t in rows]))
    return tables


def _policy_name(cfg: RunConfig) -> str:
    return f"policy_rl_{cfg.sampler}_s{cfg.steps}"


# --- stages -----------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    train, ev = P.generate_records(cfg)
    for sub in ("scenes", "anchors", "vocab"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    items = []
    for split, recs in (("train", train), ("eval", ev)):
        for rec in recs:
            sid = rec.scene_id
            write_scene(out / "scenes" / f"scene_{sid:05d}.txt", rec.scene)
            write_trajectories(out / "anchors" / f"anchor_{sid:05d}.txt", [rec.anchor], comments=[f"anchor scene={sid}"])
            rec.vocab.save(out / "vocab" / f"vocab_{sid:05d}.txt")
            items.append({"id": sid, "split": split, "difficulty": rec.difficulty, "vocab_size": len(rec.vocab)})
    _dump_json(out / "manifest.json", {"schema": SCHEMA, "scenes": items})
    anchors_safe = all(bool(np.all(r.anchor_table[:, :4] == 1.0)) for r in train + ev)
    return {"n_train": len(train), "n_eval": len(ev), "anchors_all_safe": anchors_safe,
            "vocab_sizes": {"min": min(i["vocab_size"] for i in items), "max": max(i["vocab_size"] for i in items)}}


def cmd_train_wm(cfg: RunConfig, out: Path) -> dict:
    train, _ = load_records(out)
    wm = P.make_world_model(cfg)
    rng = SeededRng(cfg.seed, P.STREAM_WM).spawn(1)
    data = P.transition_dataset(wm, train, cfg.wm_traj_per_scene, rng)
    t0 = time.perf_counter()
    curve = P.train_world_model(wm, data, cfg, rng)
    seconds = time.perf_counter() - t0
    _save_model(out / "checkpoints" / "wm.dlnn", wm, {"stage": "train-wm", "steps": len(curve)})
    _write_curve(out, "wm_loss", {"loss": curve})
    _dump_json(out / "timing" / "train_wm.json", {"seconds": seconds})
    return {"transitions": len(data[2]), "steps": len(curve), "final_loss": float(np.mean(curve[-100:]))}


def cmd_label(cfg: RunConfig, out: Path) -> dict:
    train, ev = load_records(out)
    records = train + ev
    tables = P.oracle_labels(records, cfg.workers)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for rec, tab in zip(records, tables):
        write_labels(out / "labels" / f"labels_{rec.scene_id:05d}.txt", [(rec.scene_id, i, t) for i, t in enumerate(tab)])
    stacked = np.concatenate(tables)[:, -1]
    return {"pairs": int(len(stacked)), "h8_means": {name: float(v) for name, v in zip(P.REWARD_DIMS, stacked.mean(axis=0))}}


def cmd_train_rm(cfg: RunConfig, out: Path) -> dict:
    train, ev = load_records(out)
    wm = _load_wm(out, cfg)
    rng = SeededRng(cfg.seed, P.STREAM_LABEL)
    data_tr = P.imagined_label_set(wm, train, _load_labels(out, train), cfg.steps, rng.spawn(0))
    data_ev = P.imagined_label_set(wm, ev, _load_labels(out, ev), cfg.steps, rng.spawn(1))
    data_tr = P.label_subset(data_tr, cfg.rm_label_fraction, rng.spawn(2))
    rm = P.make_reward_model(cfg)
    t0 = time.perf_counter()
    curve = P.train_reward_model(rm, data_tr, cfg, SeededRng(cfg.seed, P.STREAM_RM).spawn(1))
    seconds = time.perf_counter() - t0
    _save_model(out / "checkpoints" / "rm.dlnn", rm, {"stage": "train-rm", "steps": len(curve)})
    _write_curve(out, "rm_loss", {"loss": curve})
    _dump_json(out / "timing" / "train_rm.json", {"seconds": seconds})
    report = P.evaluate_reward_model(rm, data_ev)
    return {"train_pairs": len(data_tr), "eval_pairs": len(data_ev), "label_fraction": cfg.rm_label_fraction, **report}


def cmd_train_rl(cfg: RunConfig, out: Path) -> dict:
    train, _ = load_records(out)
    wm = _load_wm(out, cfg)
    rm = _load_model(out / "checkpoints" / "rm.dlnn", P.make_reward_model(cfg), "reward model checkpoint (run train-rm)")
    batch = P.policy_batch(wm, train)
    policy = P.make_policy(cfg)
    bc_path = out / "checkpoints" / "policy_bc.dlnn"
    if bc_path.exists():
        _load_model(bc_path, policy, "behavior-cloned policy")
        bc_curve = None
    else:
        bc_curve = P.pretrain_policy(policy, batch, cfg)
        _save_model(bc_path, policy, {"stage": "bc", "epochs": len(bc_curve)})
        _write_curve(out, "bc_loss", {"loss": bc_curve})
    history = P.train_policy_rl(policy, wm, rm, batch, cfg)
    name = _policy_name(cfg)
    _save_model(out / "checkpoints" / f"{name}.dlnn", policy, {"stage": "train-rl", "sampler": cfg.sampler, "steps": cfg.steps})
    keys = ("total", "actor", "bc", "kl", "mean_reward", "collision_freq", "candidate_jerk")
    _dump_json(out / "logs" / f"{name}.json", [{"step": h["step"], **{k: h[k] for k in keys}} for h in history])
    _dump_json(out / "timing" / f"{name}.json", [{"step": h["step"], "seconds": h["seconds"]} for h in history])
    _write_curve(out, name, {k: [h[k] for h in history] for k in keys})
    return {"policy": name, "rl_steps": len(history), "final_mean_reward": float(np.mean([h["mean_reward"] for h in history[-20:]]))}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    _, ev = load_records(out)
    wm = _load_wm(out, cfg)
    reports = {}
    bc = _load_model(out / "checkpoints" / "policy_bc.dlnn", P.make_policy(cfg), "behavior-cloned policy (run train-rl)")
    reports["bc"] = P.evaluate_policy(bc, wm, ev, cfg)
    name = _policy_name(cfg)
    rl_path = out / "checkpoints" / f"{name}.dlnn"
    if rl_path.exists():
        reports["rl"] = P.evaluate_policy(_load_model(rl_path, P.make_policy(cfg), "policy"), wm, ev, cfg)
    latency = P.imagination_latency(wm, (1, 4, 16), cfg.latency_frames, cfg.latency_repeats, cfg.seed)
    lat = {"seconds_per_frame": latency, "ratio_16_over_1": latency["16"] / latency["1"]}
    # wall-clock numbers vary run to run, so they live beside the metrics rather than in them
    _dump_json(out / "timing" / "eval_latency.json", lat)
    log.info("imagination latency per frame: %s", {k: f"{v * 1e3:.3f} ms" for k, v in lat["seconds_per_frame"].items()})
    return {"policy": name, "eval_scenes": [r.scene_id for r in ev], "reports": reports}


STAGES = {
    "gen-data": cmd_gen_data,
    "train-wm": cmd_train_wm,
    "label": cmd_label,
    "train-rm": cmd_train_rm,
    "train-rl": cmd_train_rl,
    "eval": cmd_eval,
}


# --- entry point ------------------------------------------------------------------------


def _fail(kind: str, message: str, command: str | None = None, code: int = 1) -> int:
    print(json.dumps({"status": "error", "error": kind, "command": command, "message": message}), file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SystemExit(_fail("UsageError", message, code=2))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dreamlane", description="World-model RL planning pipeline on a 2D driving oracle.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, choices=(1, 4, 16), help="world-model sampling steps")
    p.add_argument("--sampler", choices=("vocab", "random"))
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {k: v for k, v in (("seed", args.seed), ("steps", args.steps), ("sampler", args.sampler), ("out_dir", args.out)) if v is not None}
    return cfg.replace(**over) if over else cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            dump_config(cfg, out / "config.yaml")
        body = STAGES[args.command](cfg, out)
        name = args.command.replace("-", "_")
        if args.command in ("train-rl", "eval"):
            name += f"_{cfg.sampler}_s{cfg.steps}"
        path = _write_metrics(out, name, cfg, body)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), args.command)
    except StageError as exc:
        return _fail("MissingArtifact", str(exc), args.command)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), args.command)
    print(json.dumps({"status": "ok", "command": args.command, "metrics": str(path)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
