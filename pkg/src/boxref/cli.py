"""Command-line interface.

Subcommands:
  selftest   quick oracle/invariant battery, exit 0 iff everything passes
  train      train one run from a JSON config (flags override fields)
  eval       evaluate a checkpoint on its held-out scene set
  viz        dump per-head attention maps for one scene as PGM files
  sweep      train a (mode x seed) grid, optionally in parallel
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


def _load_run_config(args):
    from .config import load_config

    rc = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        rc.train = replace(rc.train, seed=args.seed)
    if getattr(args, "mode", None) is not None:
        rc.decoder = replace(rc.decoder, mode=args.mode)
    if getattr(args, "epochs", None) is not None:
        rc.train = replace(rc.train, epochs=args.epochs)
    if getattr(args, "out", None) is not None:
        rc.out_dir = args.out
    return rc


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(quick=args.quick)
    return 0 if ok else 1


def cmd_train(args) -> int:
    from .artifacts import emit_run_artifacts
    from .train import train

    rc = _load_run_config(args)
    if rc.out_dir is None:
        print("error: no output directory (set out_dir in config or pass --out)", file=sys.stderr)
        return 1
    result = train(rc)
    written = emit_run_artifacts(result, rc.out_dir)
    if result.curve:
        last = result.curve[-1]
        print(f"final: loss {last.loss:.4f}  mean_iou {last.mean_iou:.4f}  acc50 {last.acc50:.4f}")
    print(f"wrote {len(written)} artifacts to {rc.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .artifacts import load_checkpoint
    from .config import load_config
    from .scenes import generate_scenes
    from .train import build_model, evaluate

    state, rc = load_checkpoint(args.checkpoint)
    if args.config is not None:
        rc = load_config(args.config)
    store, _ = build_model(rc, np.random.default_rng(0))
    store.load_state_dict(state)
    seeds = np.random.SeedSequence(rc.train.seed).spawn(4)
    scenes = generate_scenes(np.random.default_rng(seeds[2]), rc.scene, rc.train.eval_scenes)
    mean_iou, acc50 = evaluate(store, rc, scenes)
    print(f"mean_iou {mean_iou:.4f}  acc50 {acc50:.4f}  over {len(scenes)} scenes")
    return 0


def cmd_viz(args) -> int:
    from .artifacts import emit_attention_maps, load_checkpoint, write_pgm
    from .scenes import generate_scene
    from .train import build_model, scene_forward

    state, rc = load_checkpoint(args.checkpoint)
    store, _ = build_model(rc, np.random.default_rng(0))
    store.load_state_dict(state)
    scene = generate_scene(np.random.default_rng(args.scene_seed), rc.scene)
    _, traces = scene_forward(store, rc, scene, collect_traces=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "scene.pgm", scene.grid)
    index = emit_attention_maps(out, traces, scene.grid.shape, rc.decoder.mode)
    print(f"wrote {len(index['files'])} attention maps to {out}")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import run_sweep

    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not modes or not seeds:
        print("error: sweep needs at least one mode and one seed", file=sys.stderr)
        return 1
    rc = _load_run_config(args)
    out_dir = rc.out_dir or args.out
    if out_dir is None:
        print("error: no output directory (set out_dir in config or pass --out)", file=sys.stderr)
        return 1
    summary = run_sweep(rc, modes, seeds, out_dir, jobs=args.jobs)
    for key, row in summary["runs"].items():
        print(f"{key}: mean_iou {row['mean_iou']:.4f}  acc50 {row['acc50']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxref",
                                     description="conditional cross-attention decoder benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selftest", help="run the oracle/invariant suite")
    p.add_argument("--quick", action="store_true", help="skip the slower end-to-end checks")
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("train", help="train one run")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="override the config embedded in the checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="dump attention maps for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("sweep", help="train a (mode x seed) grid")
    p.add_argument("--config", required=True)
    p.add_argument("--modes", required=True, help="comma-separated reference modes")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.set_defaults(fn=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
