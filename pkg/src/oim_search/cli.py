"""Command-line entry point: gradcheck, gen, train, eval, sweep."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, from_dict, load_config, to_dict
from .experiments import SWEEP_AXES, run_eval, run_sweep, run_train, write_json
from .gradcheck import run_gradcheck
from .synth import (
    detect_world,
    gen_world,
    read_detection_records,
    read_world_records,
    write_detection_records,
    write_world_records,
)
from .trainer import LOSS_KINDS, CheckpointError, checkpoint_load, read_checkpoint_header

log = logging.getLogger("oim_search")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "loss", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, loss_kind=args.loss)
    if getattr(args, "gallery_sizes", None) is not None:
        cfg.protocol = dataclasses.replace(cfg.protocol, gallery_sizes=args.gallery_sizes)
    return cfg


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed or 0, corrupt=args.corrupt_gradient)
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status} {c['name']:<18} cases={c['cases']:<4} max_rel_err={c['max_rel_error']:.3e} "
              f"tol={c['tolerance']:.0e}" + ("" if c["passed"] else f" worst={c['worst']}"))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_json(report, Path(args.out) / "gradcheck_report.json")
    return 0 if report["passed"] else 1


def cmd_gen(args) -> int:
    cfg = _effective_config(args).resolved()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = gen_world(cfg.synth)
    dets = detect_world(world, cfg.detector, np.random.default_rng(cfg.detector_seed))
    write_world_records(world, out / "world.jsonl")
    write_detection_records(dets, out / "detections.jsonl")
    write_json({"command": "gen", "config": to_dict(cfg), "detector_seed": cfg.detector_seed,
                "separation_accuracy": world.separation_accuracy}, out / "gen_report.json")
    print(f"wrote {len(world.scenes)} scenes and {sum(map(len, dets.values()))} detections to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    state, _ = run_train(cfg, cfg.out_dir)
    last = [m for m in state.history if not m.skipped][-1]
    print(f"trained {state.iteration} iterations ({state.config.loss_kind}); "
          f"last loss {last.loss:.4f}, accuracy {last.accuracy:.3f} -> {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint or Path(args.out or "runs/default") / "checkpoint.npz")
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return 2
    header = read_checkpoint_header(ckpt)
    # the world comes from the checkpoint; --seed only moves protocol/detector seeds
    saved = header.get("extra", {}).get("experiment")
    cfg = from_dict(saved) if saved is not None else _effective_config(args).resolved()
    if args.config:
        file_cfg = load_config(args.config)
        cfg.protocol, cfg.detector = file_cfg.protocol, file_cfg.detector
    if args.seed is not None:
        cfg.seed = args.seed
    if args.gallery_sizes:
        cfg.protocol = dataclasses.replace(cfg.protocol, gallery_sizes=args.gallery_sizes)
    world = read_world_records(args.world) if args.world else gen_world(cfg.synth)
    state = checkpoint_load(ckpt, raw_dim=world.raw_dim)
    dets = read_detection_records(args.detections) if args.detections else None
    out = Path(args.out or ckpt.parent)
    try:
        report = run_eval(cfg, state.embedder, world, out, n_seeds=args.seeds, detections=dets, checkpoint=str(ckpt))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    ks = cfg.protocol.ks
    print("gallery  " + "  ".join(f"top-{k:<3}" for k in ks) + "  mAP")
    for row in report["rows"]:
        med = row["median"]
        print(f"{row['gallery_size']:<8} " + "  ".join(f"{med['cmc'][str(k)]:.3f} " for k in ks) + f"  {med['mAP']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _effective_config(args)
    if args.axis not in SWEEP_AXES:
        print(f"error: unknown axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}", file=sys.stderr)
        return 2
    report = run_sweep(cfg, args.axis, args.values, n_seeds=args.seeds, out_dir=cfg.out_dir)
    for m in report["median"]:
        extra = f"  iteration={m['iteration']}" if "iteration" in m else ""
        extra += "".join(f"  {k}={m[k]:.3f}" for k in ("recall", "precision") if k in m)
        print(f"{args.axis} value={m['value']}{extra}  median mAP={m['mAP']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oim-search", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, loss=False):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        if loss:
            p.add_argument("--loss", choices=LOSS_KINDS)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all analytic gradients")
    common(p)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen", help="generate a synthetic world and detections as JSONL records")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an embedder; writes checkpoint.npz and metrics.csv")
    common(p, loss=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="person-search CMC/mAP for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.npz)")
    p.add_argument("--gallery-sizes", type=_int_list)
    p.add_argument("--seeds", type=int, default=1, help="number of protocol seeds; medians reported")
    p.add_argument("--world", help="world record file from `gen` (default: regenerate)")
    p.add_argument("--detections", help="detection record file from `gen`")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="factor study: mAP along one axis")
    common(p, loss=True)
    p.add_argument("--axis", required=True, help="one of: " + ", ".join(SWEEP_AXES))
    p.add_argument("--values", type=_str_list, help="comma-separated axis values")
    p.add_argument("--seeds", type=int, default=1, help="number of master seeds; medians reported")
    p.add_argument("--gallery-sizes", type=_int_list, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
