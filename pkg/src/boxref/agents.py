"""Per-head reference points condensed from the previous anchor box.

Instead of seeding every cross-attention head's spatial query at the box
center, a learned n x 2 offset tensor (the "walker") places one agent
point per head inside (or near) the previous box:

    b_i = (cx, cy) + (z_x * w/2, z_y * h/2)

As (z_x, z_y) ranges over [-1, 1]^2 the agent point sweeps the whole
box, so the n points jointly carry the box extent into the attention
stage, not just its center.  Several reference modes implement the
baseline and the ablation variants of this formula.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .attention import DEFAULT_TEMPERATURE, sinusoidal_embed
from .autodiff import ShapeError, Tensor

REF_MODES = (
    "center",                # previous box center for every head (baseline)
    "center+whm",            # center reference plus width/height modulation
    "agent-unnormalized",    # b = c + z * wh/2, z unconstrained
    "agent-tanh",            # b = c + tanh(z) * wh/2, strictly inside the box
    "agent-noscale",         # b = c + z, box extent removed
    "agent-sigma",           # b = sigmoid(logit(c) + z), confined to [0, 1]
    "agent-fixed-grid",      # 3x3 grid minus center, walker ignored
)

WALKER_MODES = ("agent-unnormalized", "agent-tanh", "agent-noscale", "agent-sigma")


def check_mode(mode: str) -> str:
    if mode not in REF_MODES:
        raise ValueError(f"unknown reference mode {mode!r}; expected one of {REF_MODES}")
    return mode


def uses_walker(mode: str) -> bool:
    return check_mode(mode) in WALKER_MODES


def walker_param_count(dim: int, heads: int) -> int:
    """Parameters of the walker head: a dim -> 2*heads linear with bias."""
    return 2 * heads * dim + 2 * heads


def init_walker_params(store, prefix: str, dim: int, heads: int) -> None:
    """Walker head starts at zero: every agent mode begins exactly at the
    center baseline and learns to move away."""
    store.add(f"{prefix}.w", np.zeros((dim, 2 * heads)))
    store.add(f"{prefix}.b", np.zeros(2 * heads))


def walker_from_embedding(f: Tensor, store, prefix: str, heads: int) -> Tensor:
    """Linear head dim -> 2*heads, reshaped to (N, heads, 2).

    No activation is applied here; range constraints (tanh mode) belong
    to the agent-point formula itself.
    """
    w = store[f"{prefix}.w"]
    if f.data.ndim != 2 or f.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"embedding shape {f.shape} does not match walker head {w.shape}")
    z = ad.affine(f, w, store[f"{prefix}.b"])
    n = f.data.shape[0]
    return z.reshape((n, heads, 2))


# offsets of the 3x3 grid over a box, excluding its center, row-major
_FIXED_GRID = np.array(
    [[gx, gy] for gy in (-1.0, 0.0, 1.0) for gx in (-1.0, 0.0, 1.0) if (gx, gy) != (0.0, 0.0)]
)


def agent_points(box, z: Tensor | None, mode: str, heads: int) -> Tensor:
    """Place one reference point per head from the previous box.

    box: (N, 4) ccwh (width/height are clamped to a small minimum);
    z:   (N, heads, 2) walker output, required by the agent-* modes
         except the fixed grid; ignored otherwise.
    Returns (N, heads, 2).
    """
    check_mode(mode)
    box = geo.clamp_min_wh(box if isinstance(box, Tensor) else ad.tensor(box))
    if box.data.ndim != 2 or box.data.shape[1] != 4:
        raise ShapeError(f"box must be (N, 4), got {box.shape}")
    n_q = box.data.shape[0]
    center = box[:, 0:2].reshape((n_q, 1, 2))
    half = (box[:, 2:4] * 0.5).reshape((n_q, 1, 2))

    if mode in ("center", "center+whm"):
        return center * ad.tensor(np.ones((1, heads, 1)))
    if mode == "agent-fixed-grid":
        if heads != _FIXED_GRID.shape[0]:
            raise ShapeError(f"fixed-grid mode defines {_FIXED_GRID.shape[0]} points, got {heads} heads")
        return center + ad.tensor(_FIXED_GRID.reshape(1, heads, 2)) * half

    if z is None:
        raise ValueError(f"mode {mode!r} requires a walker tensor")
    if z.data.shape != (n_q, heads, 2):
        raise ShapeError(f"walker shape {z.shape}, expected {(n_q, heads, 2)}")

    if mode == "agent-unnormalized":
        return center + z * half
    if mode == "agent-tanh":
        return center + ad.tanh(z) * half
    if mode == "agent-noscale":
        return center + z
    # agent-sigma
    return ad.sigmoid(geo.inverse_sigmoid(center) + z)


def per_head_spatial_queries(lam: Tensor, agents: Tensor, dim: int,
                             temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Embed each head's agent point and reweight it by lambda.

    lam: (N, dim) shared across heads or (N, heads, dim); agents:
    (N, heads, 2).  Returns (N, heads, dim).
    """
    if agents.data.ndim != 3 or agents.data.shape[-1] != 2:
        raise ShapeError(f"agents must be (N, heads, 2), got {agents.shape}")
    emb = sinusoidal_embed(agents, dim, temperature)
    if lam.data.ndim == 2:
        lam = lam.reshape((lam.data.shape[0], 1, dim))
    elif lam.data.ndim != 3:
        raise ShapeError(f"lambda must be (N, dim) or (N, heads, dim), got {lam.shape}")
    if lam.data.shape[-1] != dim:
        raise ShapeError(f"lambda width {lam.shape} does not match dim {dim}")
    return lam * emb


class WalkerStatsCollector:
    """Accumulates walker components per decoder stage and summarizes the
    fraction falling in [-1, 1] plus a fixed-bin histogram."""

    BINS = 50
    LO, HI = -3.0, 3.0

    def __init__(self, mode: str):
        self.mode = check_mode(mode)
        self._per_stage: dict[int, list[np.ndarray]] = {}

    def add(self, stage: int, z) -> None:
        arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
        self._per_stage.setdefault(int(stage), []).append(arr.reshape(-1).copy())

    def merge(self, other: "WalkerStatsCollector") -> None:
        for stage, chunks in other._per_stage.items():
            self._per_stage.setdefault(stage, []).extend(chunks)

    def summary(self) -> dict:
        """{"mode": ..., "stages": {stage: {"fraction_in_range", "histogram"}}}.

        The histogram is [edges, counts] with 50 bins over [-3, 3]; the
        counts list carries one underflow bin in front and one overflow
        bin at the end (52 entries total).
        """
        if not self._per_stage:
            raise ValueError("no walker values recorded")
        edges = np.linspace(self.LO, self.HI, self.BINS + 1)
        stages = {}
        for stage in sorted(self._per_stage):
            vals = np.concatenate(self._per_stage[stage])
            frac = float(np.mean((vals >= -1.0) & (vals <= 1.0)))
            inner, _ = np.histogram(vals, bins=edges)
            under = int(np.sum(vals < self.LO))
            over = int(np.sum(vals > self.HI))
            counts = [under] + [int(c) for c in inner] + [over]
            stages[str(stage)] = {
                "fraction_in_range": frac,
                "histogram": [[float(e) for e in edges], counts],
            }
        return {"mode": self.mode, "stages": stages}
