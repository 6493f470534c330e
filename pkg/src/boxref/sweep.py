"""Sweep runner: trains a (mode x seed) grid, each run in its own
subdirectory, optionally across worker processes.

Runs are independent and individually deterministic, so parallel
execution cannot change any result; the summary is assembled in a fixed
order regardless of completion order.
"""

from __future__ import annotations

import json
import multiprocessing as mp
from dataclasses import replace
from pathlib import Path

from .config import RunConfig


def _run_one(packed):
    # child processes re-import lazily; keep this picklable and lean
    from .artifacts import emit_run_artifacts
    from .train import train

    rc, mode, seed, out_dir = packed
    rc = replace(rc, decoder=replace(rc.decoder, mode=mode),
                 train=replace(rc.train, seed=seed), out_dir=out_dir)
    result = train(rc)
    emit_run_artifacts(result, out_dir)
    last = result.curve[-1] if result.curve else None
    return {
        "mode": mode,
        "seed": seed,
        "out_dir": out_dir,
        "mean_iou": last.mean_iou if last else 0.0,
        "acc50": last.acc50 if last else 0.0,
        "final_loss": last.loss if last else 0.0,
        "seconds": result.total_seconds,
    }


def run_key(mode: str, seed: int) -> str:
    return f"{mode}_seed{seed}"


def run_sweep(rc: RunConfig, modes: list, seeds: list, out_dir, jobs: int = 1) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(rc, mode, seed, str(out / run_key(mode, seed)))
             for mode in modes for seed in seeds]
    if jobs > 1:
        with mp.get_context("spawn").Pool(processes=min(jobs, len(tasks))) as pool:
            rows = pool.map(_run_one, tasks)
    else:
        rows = [_run_one(t) for t in tasks]
    summary = {"runs": {run_key(r["mode"], r["seed"]): r for r in rows}}
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                            encoding="utf-8")
    return summary
