"""Stagewise decoder: query self-attention, conditional cross-attention
seeded at per-head agent points, feed-forward, and anchor refinement.

Each stage reads the current anchor boxes (as sigmoid of persistent
logits) and the per-query content embedding, attends over the encoded
scene, and emits refined box logits plus per-stage class scores.  All
reference modes share one code path: the mode only changes where the
per-head agent points land, so zeroed walker parameters reproduce the
center baseline bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import agents as ag
from . import autodiff as ad
from . import geometry as geo
from .attention import (
    HeadLayout,
    ModulationFactors,
    cross_attention,
    init_lambda_params,
    lambda_from_embedding,
    self_attention,
    sinusoidal_embed,
)
from .autodiff import ParamStore, ShapeError, Tensor


@dataclass
class DecoderConfig:
    stages: int = 3
    queries: int = 16
    dim: int = 64
    heads: int = 8
    classes: int = 3
    mode: str = "agent-unnormalized"
    whm: str = "off"  # off | original | scale-free
    temperature: float = 20.0
    shared_lambda: bool = True
    detach_boxes: bool = True
    ffn_ratio: int = 4
    pre_norm: bool = True

    def __post_init__(self):
        ag.check_mode(self.mode)
        if self.whm not in ("off", "original", "scale-free"):
            raise ValueError(f"unknown whm setting {self.whm!r}")
        if self.stages < 1:
            raise ValueError("need at least one decoder stage")
        if self.dim % self.heads != 0:
            raise ShapeError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.dim % 4 != 0:
            raise ShapeError("dim must be divisible by 4 for the position embedding")

    @property
    def layout(self) -> HeadLayout:
        return HeadLayout(self.dim, self.heads)

    @property
    def reference_mode(self) -> str:
        return "center" if self.mode == "center+whm" else self.mode

    @property
    def whm_mode(self) -> str:
        if self.mode == "center+whm" and self.whm == "off":
            return "original"
        return self.whm

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderState:
    """Per-query anchor logits and content embeddings at one stage."""

    logits: Tensor      # (N, 4); sigmoid gives ccwh boxes
    embeddings: Tensor  # (N, dim)
    stage: int = 0


@dataclass
class StageTrace:
    """Diagnostics captured per stage (plain arrays, detached)."""

    stage: int
    prev_boxes: np.ndarray    # (N, 4) box that seeded this stage
    boxes: np.ndarray         # (N, 4) refined prediction
    agents: np.ndarray        # (N, heads, 2) reference points used
    attn_weights: np.ndarray  # (heads, N, K) cross-attention weights
    class_probs: np.ndarray   # (N, classes+1)
    walker: np.ndarray | None = None  # (N, heads, 2) raw offsets, walker modes only


def _linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.affine(x, store[f"{prefix}.w"], store[f"{prefix}.b"])


def _add_linear(store: ParamStore, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    store.add(f"{prefix}.w", ad.linear_init(rng, fan_in, fan_out))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def _layer_norm(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm_affine(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def _add_layer_norm(store: ParamStore, prefix: str, dim: int) -> None:
    store.add(f"{prefix}.g", np.ones(dim))
    store.add(f"{prefix}.b", np.zeros(dim))


def init_decoder_params(config: DecoderConfig, rng: np.random.Generator,
                        store: ParamStore | None = None) -> ParamStore:
    """Register all decoder parameters.

    Every head (walker, modulation, reweighting) is registered in every
    mode so that parameter layout and rng consumption are identical
    across modes; unused heads simply receive zero gradient.
    """
    if store is None:
        store = ParamStore()
    D = config.dim
    hidden = config.ffn_ratio * D
    for s in range(config.stages):
        p = f"stage{s}"
        _add_linear(store, f"{p}.sa.pos", D, D, rng)
        for name in ("q", "k", "v", "out"):
            _add_linear(store, f"{p}.sa.{name}", D, D, rng)
        _add_layer_norm(store, f"{p}.ln1", D)
        for name in ("q", "k", "v", "out"):
            _add_linear(store, f"{p}.ca.{name}", D, D, rng)
        init_lambda_params(store, f"{p}.lam", D, rng,
                           heads=None if config.shared_lambda else config.heads)
        ag.init_walker_params(store, f"{p}.walker", D, config.heads)
        _add_linear(store, f"{p}.whm", D, 2, rng)
        _add_layer_norm(store, f"{p}.ln2", D)
        _add_linear(store, f"{p}.ffn.1", D, hidden, rng)
        _add_linear(store, f"{p}.ffn.2", hidden, D, rng)
        _add_layer_norm(store, f"{p}.ln3", D)
        _add_layer_norm(store, f"{p}.ln4", D)  # head input norm (pre-norm wiring)
    # prediction heads shared across stages; the offset layer starts at
    # zero so stage boxes begin exactly at their anchors and the matching
    # is stable early in training
    _add_linear(store, "head.cls", D, config.classes + 1, rng)
    _add_linear(store, "head.box.1", D, D, rng)
    _add_linear(store, "head.box.2", D, D, rng)
    store.add("head.box.3.w", np.zeros((D, 4)))
    store.add("head.box.3.b", np.zeros(4))
    return store


def init_queries(store: ParamStore, config: DecoderConfig,
                 rng: np.random.Generator) -> DecoderState:
    """Learnable anchors (logits of uniform(0.05, 0.95) boxes) and zero
    content embeddings."""
    u = rng.uniform(0.05, 0.95, size=(config.queries, 4))
    anchors = store.add("anchors", geo.inverse_sigmoid(u).data)
    return DecoderState(logits=anchors,
                        embeddings=ad.tensor(np.zeros((config.queries, config.dim))),
                        stage=0)


def _modulation(config: DecoderConfig, f: Tensor, box: Tensor,
                store: ParamStore, prefix: str) -> ModulationFactors:
    mode = config.whm_mode
    if mode == "off":
        return ModulationFactors()
    N = f.data.shape[0]
    ref = ad.sigmoid(_linear(store, f"{prefix}.whm", f))  # (N, 2), in (0, 1)
    w_ref = ref[:, 0].reshape((1, N, 1))
    h_ref = ref[:, 1].reshape((1, N, 1))
    clamped = geo.clamp_min_wh(box)
    w_q = clamped[:, 2].reshape((1, N, 1))
    h_q = clamped[:, 3].reshape((1, N, 1))
    return ModulationFactors(mode, w_ref=w_ref, h_ref=h_ref, w_q=w_q, h_q=h_q)


def decoder_stage(state: DecoderState, memory: Tensor, key_pos: Tensor,
                  store: ParamStore, config: DecoderConfig,
                  collect_trace: bool = False):
    """One decoder stage; returns (new state, (boxes, class_logits), trace)."""
    if memory.data.shape[-1] != config.dim:
        raise ShapeError(f"memory width {memory.data.shape} does not match dim {config.dim}")
    p = f"stage{state.stage}"
    layout = config.layout
    pre = config.pre_norm
    f = state.embeddings
    box = ad.sigmoid(state.logits)  # (N, 4)

    # self-attention over queries, positions from the box centers
    pos = sinusoidal_embed(box[:, 0:2], config.dim, config.temperature)
    sa_in = _layer_norm(store, f"{p}.ln1", f) if pre else f
    qk_in = sa_in + _linear(store, f"{p}.sa.pos", pos)
    sa_out, _ = self_attention(
        _linear(store, f"{p}.sa.q", qk_in),
        _linear(store, f"{p}.sa.k", qk_in),
        _linear(store, f"{p}.sa.v", sa_in),
        layout,
        store[f"{p}.sa.out.w"], store[f"{p}.sa.out.b"],
    )
    f1 = f + sa_out if pre else _layer_norm(store, f"{p}.ln1", f + sa_out)

    # cross-attention seeded at the per-head agent points
    ca_in = _layer_norm(store, f"{p}.ln2", f1) if pre else f1
    lam = lambda_from_embedding(ca_in, store, f"{p}.lam",
                                heads=None if config.shared_lambda else config.heads)
    ref_mode = config.reference_mode
    z = None
    if ag.uses_walker(ref_mode):
        z = ag.walker_from_embedding(ca_in, store, f"{p}.walker", config.heads)
    agent_pts = ag.agent_points(box, z, ref_mode, config.heads)
    spatial_q = ag.per_head_spatial_queries(lam, agent_pts, config.dim, config.temperature)
    factors = _modulation(config, ca_in, box, store, p)
    ca_out, weights = cross_attention(
        _linear(store, f"{p}.ca.q", ca_in),
        _linear(store, f"{p}.ca.k", memory),
        spatial_q,
        key_pos,
        _linear(store, f"{p}.ca.v", memory),
        layout,
        store[f"{p}.ca.out.w"], store[f"{p}.ca.out.b"],
        factors=factors,
    )
    f2 = f1 + ca_out if pre else _layer_norm(store, f"{p}.ln2", f1 + ca_out)

    ffn_in = _layer_norm(store, f"{p}.ln3", f2) if pre else f2
    ffn = _linear(store, f"{p}.ffn.2", ad.relu(_linear(store, f"{p}.ffn.1", ffn_in)))
    f3 = f2 + ffn if pre else _layer_norm(store, f"{p}.ln3", f2 + ffn)

    # shared prediction heads; the refinement trains on its own offsets
    head_in = _layer_norm(store, f"{p}.ln4", f3) if pre else f3
    class_logits = _linear(store, "head.cls", head_in)
    h = ad.relu(_linear(store, "head.box.1", head_in))
    h = ad.relu(_linear(store, "head.box.2", h))
    offsets = _linear(store, "head.box.3", h)
    base = state.logits.detach() if config.detach_boxes else state.logits
    new_logits = base + offsets
    new_boxes = ad.sigmoid(new_logits)

    trace = None
    if collect_trace:
        with ad.no_grad():
            probs = ad.softmax(class_logits).data
        trace = StageTrace(
            stage=state.stage,
            prev_boxes=box.data.copy(),
            boxes=new_boxes.data.copy(),
            agents=agent_pts.data.copy(),
            attn_weights=weights.data.copy(),
            class_probs=probs,
            walker=None if z is None else z.data.copy(),
        )
    new_state = DecoderState(logits=new_logits, embeddings=f3, stage=state.stage + 1)
    return new_state, (new_boxes, class_logits), trace


def forward(state: DecoderState, memory: Tensor, key_pos: Tensor,
            store: ParamStore, config: DecoderConfig,
            collect_traces: bool = False):
    """Run all stages; returns (per-stage (boxes, class_logits), traces)."""
    outputs = []
    traces = [] if collect_traces else None
    for _ in range(config.stages):
        state, out, trace = decoder_stage(state, memory, key_pos, store, config,
                                          collect_trace=collect_traces)
        outputs.append(out)
        if collect_traces:
            traces.append(trace)
    return outputs, traces
