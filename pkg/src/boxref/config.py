"""Run configuration: scene spec + decoder config + training options.

Configs load from a single JSON file with three sections ("scene",
"decoder", "train") plus an optional "out_dir"; CLI flags override
individual fields.  Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .decoder import DecoderConfig
from .scenes import SceneSpec


@dataclass
class TrainConfig:
    epochs: int = 60
    train_scenes: int = 200
    eval_scenes: int = 50
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_drop_epoch: int = 48       # multiply lr by lr_drop_factor from this epoch on
    lr_drop_factor: float = 0.1
    clip_norm: float = 0.5        # global gradient-norm clip; 0 disables
    encoder_attention: bool = False
    loss_cls: float = 2.0
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    no_object_weight: float = 0.1
    csv_wall_clock: bool = False  # measured seconds go to timing.json; the
                                  # curve CSV stays byte-deterministic unless
                                  # this is set

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise ValueError("need at least one train and one eval scene")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str | None = None


def _build(cls, section: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**section)


def run_config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - {"scene", "decoder", "train", "out_dir"}
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    return RunConfig(
        scene=_build(SceneSpec, d.get("scene", {}), "scene"),
        decoder=_build(DecoderConfig, d.get("decoder", {}), "decoder"),
        train=_build(TrainConfig, d.get("train", {}), "train"),
        out_dir=d.get("out_dir"),
    )


def run_config_to_dict(rc: RunConfig) -> dict:
    return {
        "scene": asdict(rc.scene),
        "decoder": asdict(rc.decoder),
        "train": asdict(rc.train),
        "out_dir": rc.out_dir,
    }


def load_config(path) -> RunConfig:
    with open(Path(path), "r", encoding="utf-8") as fh:
        return run_config_from_dict(json.load(fh))


def reference_config() -> RunConfig:
    """The benchmark configuration used for mode comparisons."""
    return RunConfig()
