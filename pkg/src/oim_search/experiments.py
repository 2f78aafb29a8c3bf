"""Reproducible experiment drivers behind the CLI: train, eval and factor sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import statistics
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, to_dict
from .embedder import EmbedderParams
from .evaluation import evaluate_search
from .synth import Detection, SynthWorld, detect_world, detection_recall_precision, gen_world
from .trainer import TrainState, checkpoint_save, train_model, write_metrics_csv

log = logging.getLogger(__name__)

SWEEP_AXES = ("subsample", "recall", "gallery_size", "dimension")


def write_json(obj, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


def seeds_for(cfg: ExperimentConfig, n_seeds: int) -> list[int]:
    return [cfg.seed + i for i in range(n_seeds)]


def run_train(cfg: ExperimentConfig, out_dir: Optional[str | Path] = None) -> tuple[TrainState, SynthWorld]:
    """Generate the world, train, and write checkpoint.npz + metrics.csv."""
    cfg = cfg.resolved()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    world = gen_world(cfg.synth)
    state = train_model(cfg.train, world)
    elapsed = time.perf_counter() - t0
    checkpoint_save(state, out / "checkpoint.npz", extra={"experiment": to_dict(cfg)})
    write_metrics_csv(state.history, out / "metrics.csv")
    write_json({"command": "train", "config": to_dict(cfg), "iterations": state.iteration,
                "separation_accuracy": world.separation_accuracy}, out / "train_report.json")
    write_json({"train_seconds": elapsed}, out / "timings.json")
    log.info("trained %d iterations in %.1fs -> %s", state.iteration, elapsed, out)
    return state, world


def eval_rows(
    cfg: ExperimentConfig,
    world: SynthWorld,
    params: EmbedderParams,
    gallery_sizes: Sequence[int],
    n_seeds: int = 1,
    detections: Optional[dict[int, list[Detection]]] = None,
    score_threshold: float = -math.inf,
) -> list[dict]:
    """One row per gallery size; each row holds per-protocol-seed results and medians."""
    if detections is None:
        detections = detect_world(world, cfg.detector, np.random.default_rng(cfg.detector_seed))
    rows = []
    for g in gallery_sizes:
        per_seed = [
            evaluate_search(world, params, g, cfg.protocol_seed(i), ks=cfg.protocol.ks,
                            iou_threshold=cfg.protocol.iou_threshold, detections=detections,
                            score_threshold=score_threshold).as_dict()
            for i in range(n_seeds)
        ]
        rows.append({
            "gallery_size": g,
            "per_seed": per_seed,
            "median": {
                "mAP": median([r["mAP"] for r in per_seed]),
                "cmc": {str(k): median([r["cmc"][str(k)] for r in per_seed]) for k in cfg.protocol.ks},
            },
        })
    return rows


def run_eval(
    cfg: ExperimentConfig,
    params: EmbedderParams,
    world: SynthWorld,
    out_dir: str | Path,
    gallery_sizes: Optional[Sequence[int]] = None,
    n_seeds: int = 1,
    detections: Optional[dict[int, list[Detection]]] = None,
    checkpoint: Optional[str] = None,
) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sizes = list(gallery_sizes or cfg.protocol.gallery_sizes)
    t0 = time.perf_counter()
    rows = eval_rows(cfg, world, params, sizes, n_seeds, detections)
    report = {
        "command": "eval",
        "config": to_dict(cfg),
        "checkpoint": checkpoint,
        "protocol_seeds": [cfg.protocol_seed(i) for i in range(n_seeds)],
        "detector_seed": cfg.detector_seed,
        "rows": rows,
    }
    write_json(report, out / "eval_report.json")
    write_json({"eval_seconds": time.perf_counter() - t0}, out / "eval_timings.json")
    return report


# sweeps


def _subsample_value(v: str) -> Optional[int]:
    return None if str(v).lower() == "full" else int(v)


def _sweep_seed(cfg: ExperimentConfig, seed: int, axis: str, values: Sequence[str]) -> list[dict]:
    """All sweep points for one master seed. Returns flat curve rows."""
    cfg = cfg.resolved(seed)
    world = gen_world(cfg.synth)
    dets = detect_world(world, cfg.detector, np.random.default_rng(cfg.detector_seed))
    gsize = cfg.protocol.sweep_gallery_size
    rows = []

    def map_at(params, g=gsize, threshold=-math.inf):
        return evaluate_search(world, params, g, cfg.protocol_seed(0), detections=dets,
                               score_threshold=threshold, iou_threshold=cfg.protocol.iou_threshold,
                               ks=cfg.protocol.ks).mean_ap

    if axis == "subsample":
        for v in values:
            k = _subsample_value(v)
            tcfg = dataclasses.replace(
                cfg.train,
                subsample_labeled=None if k is None else min(k, world.config.num_labeled),
                subsample_unlabeled=None if k is None else min(k, cfg.train.queue_capacity),
            )
            curve = []

            def cb(state, curve=curve):
                if state.iteration % cfg.sweep.eval_every == 0 or state.iteration == tcfg.total_iters:
                    curve.append((state.iteration, map_at(state.embedder)))

            train_model(tcfg, world, callback=cb)
            rows += [{"value": str(v), "seed": seed, "iteration": it, "mAP": m} for it, m in curve]
    elif axis == "dimension":
        for v in values:
            state = train_model(dataclasses.replace(cfg.train, out_dim=int(v)), world)
            rows.append({"value": str(v), "seed": seed, "mAP": map_at(state.embedder)})
    elif axis == "gallery_size":
        state = train_model(cfg.train, world)
        for v in values:
            rows.append({"value": str(v), "seed": seed, "mAP": map_at(state.embedder, g=int(v))})
    elif axis == "recall":
        state = train_model(cfg.train, world)
        for v in values:
            thr = float(v)
            recall, precision = detection_recall_precision(world.test_scenes, dets, thr, cfg.protocol.iou_threshold)
            rows.append({"value": str(v), "seed": seed, "recall": recall, "precision": precision,
                         "mAP": map_at(state.embedder, threshold=thr)})
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    return rows


def default_values(cfg: ExperimentConfig, axis: str) -> list[str]:
    return {
        "subsample": ["4", "16", "full"],
        "recall": [repr(t) for t in cfg.sweep.recall_thresholds],
        "gallery_size": ["10", "20", "40", "80"],
        "dimension": ["4", "16", "32", "64"],
    }[axis]


def run_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: Optional[Sequence[str]] = None,
    n_seeds: int = 1,
    out_dir: Optional[str | Path] = None,
) -> dict:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values or default_values(cfg, axis))
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = []
    for seed in seeds_for(cfg, n_seeds):
        rows += _sweep_seed(cfg, seed, axis, values)

    medians = []
    keyed: dict[tuple, list[dict]] = {}
    for r in rows:
        keyed.setdefault((r["value"], r.get("iteration")), []).append(r)
    for (value, iteration), group in keyed.items():
        m = {"value": value, "mAP": median([g["mAP"] for g in group])}
        if iteration is not None:
            m["iteration"] = iteration
        for extra in ("recall", "precision"):
            if extra in group[0]:
                m[extra] = median([g[extra] for g in group])
        medians.append(m)

    fields = ["value", "seed"] + [f for f in ("iteration", "recall", "precision") if rows and f in rows[0]] + ["mAP"]
    with open(out / f"sweep_{axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    report = {
        "command": "sweep",
        "axis": axis,
        "values": values,
        "seeds": seeds_for(cfg, n_seeds),
        "config": to_dict(cfg),
        "per_seed": rows,
        "median": medians,
    }
    write_json(report, out / f"sweep_{axis}.json")
    write_json({"sweep_seconds": time.perf_counter() - t0}, out / f"sweep_{axis}_timings.json")
    return report
