"""Run artifacts: curve CSV, walker statistics, attention maps (PGM),
viz index, and binary checkpoints.

Checkpoint layout: one line of JSON (newline-terminated) followed by the
raw little-endian float64 parameter payload.  The header maps each
parameter name to its byte offset within the payload and its shape, and
carries the full run configuration so a checkpoint is self-describing.

The curves CSV is byte-deterministic for a given (config, seed) pair:
measured wall-clock goes to timing.json, and the CSV seconds column
stays 0.0 unless the run opts into csv_wall_clock.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .config import RunConfig, run_config_from_dict, run_config_to_dict
from .train import CurvePoint, TrainResult

CURVE_HEADER = "epoch,loss,mean_iou,acc50,seconds"


def write_curve_csv(path, curve: list, wall_clock: bool = False) -> None:
    lines = [CURVE_HEADER]
    for pt in curve:
        seconds = pt.seconds if wall_clock else 0.0
        lines.append(f"{pt.epoch},{pt.loss!r},{pt.mean_iou!r},{pt.acc50!r},{seconds!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_timing_json(path, curve: list, total_seconds: float) -> None:
    doc = {
        "total_seconds": total_seconds,
        "epoch_seconds": [pt.seconds for pt in curve],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def write_walker_stats(path, stats: dict) -> None:
    Path(path).write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")


def save_checkpoint(path, store: ParamStore, rc: RunConfig) -> None:
    params = {}
    chunks = []
    offset = 0
    for name, p in store.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        params[name] = {"offset": offset, "shape": list(p.data.shape)}
        chunks.append(raw)
        offset += len(raw)
    header = {"format": "boxref-checkpoint-v1", "dtype": "<f8",
              "params": params, "config": run_config_to_dict(rc)}
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(blob + b"\n")
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Returns (state_dict name->ndarray, RunConfig)."""
    with open(Path(path), "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != "boxref-checkpoint-v1":
        raise ValueError(f"not a recognized checkpoint: {path}")
    state = {}
    for name, meta in header["params"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        state[name] = arr.reshape(shape).astype(np.float64)
    return state, run_config_from_dict(header["config"])


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D array, min-max normalized; a constant
    array renders mid-gray."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got shape {v.shape}")
    lo, hi = v.min(), v.max()
    if hi > lo:
        scaled = (v - lo) / (hi - lo)
    else:
        scaled = np.full_like(v, 0.5)
    pixels = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def emit_attention_maps(out_dir, traces, grid_hw, mode: str) -> dict:
    """One PGM per (query, stage, head) plus a JSON index describing each
    file's agent point and the boxes around that stage."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = grid_hw
    index = {"mode": mode, "grid": [h, w], "files": {}}
    for trace in traces:
        heads, n_q, n_keys = trace.attn_weights.shape
        if n_keys != h * w:
            raise ValueError(f"attention over {n_keys} keys does not fit grid {h}x{w}")
        for q in range(n_q):
            for head in range(heads):
                name = f"attn_q{q:02d}_s{trace.stage}_h{head}.pgm"
                write_pgm(out / name, trace.attn_weights[head, q].reshape(h, w))
                index["files"][name] = {
                    "query": q,
                    "stage": trace.stage,
                    "head": head,
                    "agent_point": [float(x) for x in trace.agents[q, head]],
                    "previous_box": [float(x) for x in trace.prev_boxes[q]],
                    "current_box": [float(x) for x in trace.boxes[q]],
                }
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    return index


def emit_run_artifacts(result: TrainResult, out_dir) -> dict:
    """Write the standard training artifacts; returns path -> description."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc = result.config
    written = {}
    write_curve_csv(out / "curves.csv", result.curve, wall_clock=rc.train.csv_wall_clock)
    written["curves.csv"] = "per-epoch loss and eval metrics"
    write_timing_json(out / "timing.json", result.curve, result.total_seconds)
    written["timing.json"] = "measured wall-clock seconds"
    save_checkpoint(out / "checkpoint.bin", result.store, rc)
    written["checkpoint.bin"] = "final parameters + config"
    if result.walker_stats is not None:
        write_walker_stats(out / "walker_stats.json", result.walker_stats)
        written["walker_stats.json"] = "per-stage walker offset statistics"
    (out / "config.json").write_text(
        json.dumps(run_config_to_dict(rc), indent=2) + "\n", encoding="utf-8")
    written["config.json"] = "resolved run configuration"
    return written
