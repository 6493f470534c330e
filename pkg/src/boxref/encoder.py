"""Stub scene encoder: local-patch token projection plus optional
single-layer self-attention, standing in for a backbone + encoder stack.

Each grid cell becomes one memory token: a linear projection of its
3x3 intensity neighborhood (zero-padded at the borders).  Key position
embeddings come from the fixed token centers and are precomputed per
grid geometry.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .attention import HeadLayout, self_attention, sinusoidal_embed
from .autodiff import ParamStore, ShapeError, Tensor
from .scenes import Scene

PATCH = 3  # neighborhood side length


@dataclass
class MemoryTokens:
    content: Tensor            # (H*W, dim)
    key_pos: Tensor            # (H*W, dim), constant
    grid_hw: tuple[int, int]


def token_centers(grid_h: int, grid_w: int) -> np.ndarray:
    """(H*W, 2) centers of the grid cells, row-major, (x, y) order."""
    ys = (np.arange(grid_h) + 0.5) / grid_h
    xs = (np.arange(grid_w) + 0.5) / grid_w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


@lru_cache(maxsize=16)
def key_position_embeddings(grid_h: int, grid_w: int, dim: int,
                            temperature: float) -> np.ndarray:
    centers = token_centers(grid_h, grid_w)
    return sinusoidal_embed(ad.tensor(centers), dim, temperature).data


def init_encoder_params(store: ParamStore, dim: int, rng: np.random.Generator,
                        attn_layer: bool = False, heads: int = 8,
                        ffn_ratio: int = 4) -> None:
    store.add("enc.patch.w", ad.linear_init(rng, PATCH * PATCH, dim))
    store.add("enc.patch.b", np.zeros(dim))
    if attn_layer:
        for name in ("q", "k", "v", "out"):
            store.add(f"enc.attn.{name}.w", ad.linear_init(rng, dim, dim))
            store.add(f"enc.attn.{name}.b", np.zeros(dim))
        store.add("enc.ln1.g", np.ones(dim))
        store.add("enc.ln1.b", np.zeros(dim))
        store.add("enc.ffn.w1", ad.linear_init(rng, dim, ffn_ratio * dim))
        store.add("enc.ffn.b1", np.zeros(ffn_ratio * dim))
        store.add("enc.ffn.w2", ad.linear_init(rng, ffn_ratio * dim, dim))
        store.add("enc.ffn.b2", np.zeros(dim))
        store.add("enc.ln2.g", np.ones(dim))
        store.add("enc.ln2.b", np.zeros(dim))


def _patches(grid: np.ndarray) -> np.ndarray:
    """(H, W) -> (H*W, 9) zero-padded 3x3 neighborhoods, row-major."""
    padded = np.pad(grid, 1)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (PATCH, PATCH))
    return windows.reshape(-1, PATCH * PATCH)


def encode_scene(scene: Scene, store: ParamStore, dim: int,
                 temperature: float, heads: int = 8,
                 attn_layer: bool = False) -> MemoryTokens:
    grid = scene.grid
    h, w = grid.shape
    if store["enc.patch.w"].data.shape != (PATCH * PATCH, dim):
        raise ShapeError(
            f"patch projection shaped {store['enc.patch.w'].data.shape}, expected {(PATCH * PATCH, dim)}"
        )
    tokens = ad.affine(ad.tensor(_patches(grid)), store["enc.patch.w"], store["enc.patch.b"])
    key_pos = ad.tensor(key_position_embeddings(h, w, dim, temperature))
    if attn_layer:
        qk_in = tokens + key_pos
        out, _ = self_attention(
            ad.affine(qk_in, store["enc.attn.q.w"], store["enc.attn.q.b"]),
            ad.affine(qk_in, store["enc.attn.k.w"], store["enc.attn.k.b"]),
            ad.affine(tokens, store["enc.attn.v.w"], store["enc.attn.v.b"]),
            HeadLayout(dim, heads),
            store["enc.attn.out.w"], store["enc.attn.out.b"],
        )
        x = ad.layer_norm_affine(tokens + out, store["enc.ln1.g"], store["enc.ln1.b"])
        ffn = ad.affine(ad.relu(ad.affine(x, store["enc.ffn.w1"], store["enc.ffn.b1"])),
                        store["enc.ffn.w2"], store["enc.ffn.b2"])
        tokens = ad.layer_norm_affine(x + ffn, store["enc.ln2.g"], store["enc.ln2.b"])
    return MemoryTokens(content=tokens, key_pos=key_pos, grid_hw=(h, w))
