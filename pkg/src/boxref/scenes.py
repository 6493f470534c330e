"""Synthetic rectangle scenes: a desk-scale stand-in for real imagery.

A scene is an H x W intensity grid containing K axis-aligned filled
rectangles, each carrying a class-indexed intensity.  Later rectangles
are painted on top of earlier ones.  Ground truth is the full list of
sampled boxes and classes, occluded or not.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

_MAX_REJECTS = 10_000


@dataclass(frozen=True)
class SceneSpec:
    grid_h: int = 24
    grid_w: int = 24
    k_min: int = 1
    k_max: int = 3
    s_min: float = 0.1
    s_max: float = 0.5
    classes: int = 3

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid must have positive extent")
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValueError(f"bad rectangle count range [{self.k_min}, {self.k_max}]")
        if not 0.0 < self.s_min <= self.s_max:
            raise ValueError(f"bad size range [{self.s_min}, {self.s_max}]")
        if self.s_min > 1.0:
            raise ValueError(f"s_min {self.s_min} > 1: no rectangle fits the unit square")
        if self.classes < 1:
            raise ValueError("need at least one class")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    grid: np.ndarray     # (H, W) float64 intensities in [0, 1]
    boxes: np.ndarray    # (K, 4) ccwh, normalized
    classes: np.ndarray  # (K,) int


def class_intensity(c: int, classes: int) -> float:
    """Distinct fill intensity per class, in (0, 1]."""
    return (c + 1) / classes


def generate_scene(rng: np.random.Generator, spec: SceneSpec) -> Scene:
    """Sample K rectangles (rejection-sampled to fit in the unit square)
    and rasterize them in painter's order."""
    k = int(rng.integers(spec.k_min, spec.k_max + 1))
    boxes = np.empty((k, 4))
    classes = np.empty(k, dtype=np.intp)
    for i in range(k):
        w = float(rng.uniform(spec.s_min, min(spec.s_max, 1.0)))
        h = float(rng.uniform(spec.s_min, min(spec.s_max, 1.0)))
        for attempt in range(_MAX_REJECTS):
            cx = float(rng.uniform(0.0, 1.0))
            cy = float(rng.uniform(0.0, 1.0))
            if w / 2 <= cx <= 1 - w / 2 and h / 2 <= cy <= 1 - h / 2:
                break
        else:
            raise RuntimeError(f"could not place a {w:.3f} x {h:.3f} rectangle "
                               f"after {_MAX_REJECTS} attempts")
        boxes[i] = (cx, cy, w, h)
        classes[i] = int(rng.integers(0, spec.classes))

    H, W = spec.grid_h, spec.grid_w
    grid = np.zeros((H, W))
    cx_cells = (np.arange(W) + 0.5) / W
    cy_cells = (np.arange(H) + 0.5) / H
    for (cx, cy, w, h), c in zip(boxes, classes):
        in_x = (cx_cells >= cx - w / 2) & (cx_cells <= cx + w / 2)
        in_y = (cy_cells >= cy - h / 2) & (cy_cells <= cy + h / 2)
        grid[np.ix_(in_y, in_x)] = class_intensity(int(c), spec.classes)
    return Scene(grid=grid, boxes=boxes, classes=classes)


def generate_scenes(rng: np.random.Generator, spec: SceneSpec, count: int) -> list[Scene]:
    return [generate_scene(rng, spec) for _ in range(count)]
