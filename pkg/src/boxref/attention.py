"""Positional embeddings and decomposed content+spatial cross-attention.

The attention logit for one head is the sum of a content inner product
and a spatial inner product between sinusoidal position embeddings,
scaled by 1/sqrt(2*head_dim) (the effective per-head query width once
both parts are counted).  The spatial query is a reference-point
embedding reweighted elementwise by a query-conditional vector; the
spatial logit may additionally be modulated by width/height factors.

Embedding layout: a D-dim embedding is the x-part (D/2 channels)
followed by the y-part (D/2 channels); each part interleaves
(sin, cos) pairs over D/4 geometric frequencies.  Heads slice the D
channels contiguously, so a head sees only x channels or only y
channels for n >= 2 (this is what lets individual heads specialize in
horizontal vs vertical localization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DEFAULT_TEMPERATURE = 20.0

WHM_MODES = ("off", "original", "scale-free")


@dataclass(frozen=True)
class HeadLayout:
    """Multi-head split of the model width."""

    dim: int
    heads: int

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ShapeError(f"heads ({self.heads}) must divide dim ({self.dim})")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def sinusoidal_embed(points, dim: int, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Embed (..., 2) unit-square points into (..., dim) sinusoidal features.

    Per coordinate t and frequency index i (i = 0..dim/4-1, wavelength
    temperature**(4i/dim)), the pair entries are sin(2*pi*t/w_i) and
    cos(2*pi*t/w_i).  The self inner product of any embedding is dim/2.
    """
    if dim % 4 != 0:
        raise ShapeError(f"embedding dim must be divisible by 4, got {dim}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    pts = points if isinstance(points, Tensor) else ad.tensor(points)
    if pts.data.shape[-1] != 2:
        raise ShapeError(f"points must have 2 trailing coordinates, got {pts.shape}")
    return ad.sinusoid_embed2d(pts, _angular_frequencies(dim, temperature))


@lru_cache(maxsize=16)
def _angular_frequencies(dim: int, temperature: float) -> np.ndarray:
    quarter = dim // 4
    return 2.0 * np.pi * temperature ** (-4.0 * np.arange(quarter) / dim)


def init_lambda_params(store, prefix: str, dim: int, rng: np.random.Generator,
                       heads: int | None = None) -> None:
    """Two-layer projection generator: dim -> dim -> dim (or dim*heads
    when the reweighting is unshared across heads).

    The final bias starts at one so the initial reweighting is the
    identity and spatial attention is live from the first step.
    """
    out = dim if heads is None else dim * heads
    store.add(f"{prefix}.w1", ad.linear_init(rng, dim, dim))
    store.add(f"{prefix}.b1", np.zeros(dim))
    store.add(f"{prefix}.w2", ad.linear_init(rng, dim, out))
    store.add(f"{prefix}.b2", np.ones(out))


def lambda_from_embedding(f: Tensor, store, prefix: str,
                          heads: int | None = None) -> Tensor:
    """Per-query reweighting vector lambda from the decoder embedding.

    Returns (N, dim) when shared across heads, else (N, heads, dim).
    """
    w1 = store[f"{prefix}.w1"]
    if f.data.shape[-1] != w1.data.shape[0]:
        raise ShapeError(f"embedding width {f.shape} does not match projection {w1.shape}")
    h = ad.relu(ad.affine(f, w1, store[f"{prefix}.b1"]))
    lam = ad.affine(h, store[f"{prefix}.w2"], store[f"{prefix}.b2"])
    if heads is not None:
        n = f.data.shape[0]
        dim = w1.data.shape[0]
        lam = lam.reshape((n, heads, dim))
    return lam


def conditional_spatial_query(lam: Tensor, pos: Tensor) -> Tensor:
    """Elementwise product of the reweighting vector and a position embedding."""
    if lam.data.shape[-1] != pos.data.shape[-1]:
        raise ShapeError(f"length mismatch: lambda {lam.shape} vs embedding {pos.shape}")
    return lam * pos


@dataclass
class ModulationFactors:
    """Width/height modulation of the spatial logit terms.

    mode 'off'        : x_term + y_term
    mode 'original'   : x_term * w_ref/w_q + y_term * h_ref/h_q
    mode 'scale-free' : 2 * (x_term * w_ref + y_term * h_ref)

    Factor tensors must broadcast against the logit terms (scalars, or
    shaped (1, N, 1) for per-query factors against (heads, N, keys)).
    """

    mode: str = "off"
    w_ref: Tensor | None = None
    h_ref: Tensor | None = None
    w_q: Tensor | None = None
    h_q: Tensor | None = None

    def __post_init__(self):
        if self.mode not in WHM_MODES:
            raise ValueError(f"unknown modulation mode {self.mode!r}; expected one of {WHM_MODES}")


def wh_modulate(x_term, y_term, factors: ModulationFactors, dim: int) -> Tensor:
    """Combine the x/y spatial logit terms, normalized by 1/sqrt(dim)."""
    x_term = x_term if isinstance(x_term, Tensor) else ad.tensor(x_term)
    y_term = y_term if isinstance(y_term, Tensor) else ad.tensor(y_term)
    inv = 1.0 / math.sqrt(dim)
    if factors.mode == "off":
        return (x_term + y_term) * inv
    if factors.mode == "original":
        for name in ("w_ref", "h_ref", "w_q", "h_q"):
            if getattr(factors, name) is None:
                raise ValueError(f"original modulation requires {name}")
        if np.any(factors.w_q.data <= 0.0) or np.any(factors.h_q.data <= 0.0):
            raise ValueError("modulation requires positive previous box width/height")
        rw = factors.w_ref / factors.w_q
        rh = factors.h_ref / factors.h_q
        return (x_term * rw + y_term * rh) * inv
    # scale-free: widths/heights are typically < 1, the factor 2 restores
    # the lost amplitude relative to the unmodulated logits.
    for name in ("w_ref", "h_ref"):
        if getattr(factors, name) is None:
            raise ValueError(f"scale-free modulation requires {name}")
    return ((x_term * factors.w_ref + y_term * factors.h_ref) * 2.0) * inv


@lru_cache(maxsize=8)
def _xy_head_masks(dim: int, heads: int):
    """(heads, head_dim, 1) masks selecting x / y channels inside each head."""
    d_h = dim // heads
    chan = np.arange(dim).reshape(heads, d_h)
    mx = (chan < dim // 2).astype(np.float64)[:, :, None]
    return mx, 1.0 - mx


def _to_heads(x: Tensor, layout: HeadLayout, rows: int) -> Tensor:
    """(rows, dim) -> (heads, rows, head_dim)."""
    return x.reshape((rows, layout.heads, layout.head_dim)).transpose((1, 0, 2))


def cross_attention(content_q: Tensor, content_k: Tensor, spatial_q: Tensor,
                    spatial_k: Tensor, values: Tensor, layout: HeadLayout,
                    out_w: Tensor, out_b: Tensor,
                    factors: ModulationFactors | None = None):
    """Decomposed multi-head cross-attention.

    content_q: (N, dim) projected query content
    content_k: (K, dim) projected key content
    spatial_q: (N, dim) one spatial query shared by all heads, or
               (N, heads, dim) one per head
    spatial_k: (K, dim) key position embeddings (not projected)
    values:    (K, dim) projected values
    out_w/out_b: final linear merge of the concatenated heads

    Returns (output (N, dim), weights (heads, N, K)).
    """
    n_heads, d_h = layout.heads, layout.head_dim
    N = content_q.data.shape[0]
    K = content_k.data.shape[0]
    for name, t in (("content_q", content_q), ("content_k", content_k),
                    ("spatial_k", spatial_k), ("values", values)):
        if t.data.shape[-1] != layout.dim:
            raise ShapeError(f"{name} width {t.data.shape} does not match dim {layout.dim}")
    if spatial_q.data.ndim == 3:
        if spatial_q.data.shape[1] != n_heads:
            raise ShapeError(
                f"spatial_q carries {spatial_q.data.shape[1]} heads, layout has {n_heads}"
            )
        sq_heads = ad.diag_block_select(spatial_q, n_heads)  # (N, heads, d_h)
    elif spatial_q.data.ndim == 2:
        sq_heads = spatial_q.reshape((N, n_heads, d_h))
    else:
        raise ShapeError(f"spatial_q must be (N, dim) or (N, heads, dim), got {spatial_q.shape}")
    sq_heads = sq_heads.transpose((1, 0, 2))  # (heads, N, d_h)

    cq = _to_heads(content_q, layout, N)                      # (heads, N, d_h)
    ck = _to_heads(content_k, layout, K).transpose((0, 2, 1))  # (heads, d_h, K)
    v = _to_heads(values, layout, K)                           # (heads, K, d_h)

    sk_heads = _to_heads(spatial_k, layout, K).transpose((0, 2, 1))  # (heads, d_h, K)
    mx, my = _xy_head_masks(layout.dim, n_heads)
    x_term = sq_heads @ (sk_heads * ad.tensor(mx))  # (heads, N, K)
    y_term = sq_heads @ (sk_heads * ad.tensor(my))

    width = 2 * d_h  # content + spatial parts per head
    spatial_logits = wh_modulate(x_term, y_term, factors or ModulationFactors(), width)
    logits = (cq * (1.0 / math.sqrt(width))) @ ck + spatial_logits
    weights = ad.softmax(logits)                  # (heads, N, K)

    merged = (weights @ v).transpose((1, 0, 2)).reshape((N, layout.dim))
    return ad.affine(merged, out_w, out_b), weights


def self_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, layout: HeadLayout,
                   out_w: Tensor, out_b: Tensor):
    """Plain multi-head attention used for the query/encoder self-attention."""
    N = q_in.data.shape[0]
    K = k_in.data.shape[0]
    q = _to_heads(q_in, layout, N)
    k = _to_heads(k_in, layout, K).transpose((0, 2, 1))
    v = _to_heads(v_in, layout, K)
    logits = (q * (1.0 / math.sqrt(layout.head_dim))) @ k
    weights = ad.softmax(logits)
    merged = (weights @ v).transpose((1, 0, 2)).reshape((N, layout.dim))
    return ad.affine(merged, out_w, out_b), weights
