"""Training and evaluation loops for the synthetic detection benchmark.

One run is fully determined by its RunConfig (seeds included): scene
sets, parameter init, and the per-epoch shuffle all derive from
independent child seeds of the configured master seed.  BLAS thread
pools are pinned to one thread for the duration of a run so repeated
runs reduce in the same order.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import geometry as geo
from .agents import WalkerStatsCollector, uses_walker
from .autodiff import OptState, ParamStore, adam_step
from .config import RunConfig
from .decoder import DecoderState, forward, init_decoder_params, init_queries
from .encoder import encode_scene, init_encoder_params
from .matching import LossWeights, hungarian, match_cost_matrix, set_loss
from .scenes import Scene, generate_scenes

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - dependency is declared, but stay usable
    @contextlib.contextmanager
    def threadpool_limits(limits=None):
        yield


@dataclass
class CurvePoint:
    epoch: int
    loss: float
    mean_iou: float
    acc50: float
    seconds: float


@dataclass
class TrainResult:
    curve: list
    store: ParamStore
    config: RunConfig
    walker_stats: dict | None
    total_seconds: float


def loss_weights(rc: RunConfig) -> LossWeights:
    t = rc.train
    return LossWeights(cls=t.loss_cls, l1=t.loss_l1, giou=t.loss_giou,
                       no_object=t.no_object_weight)


def build_model(rc: RunConfig, rng: np.random.Generator):
    """Fresh parameter store + initial query state for a run config."""
    store = ParamStore()
    init_encoder_params(store, rc.decoder.dim, rng,
                        attn_layer=rc.train.encoder_attention, heads=rc.decoder.heads,
                        ffn_ratio=rc.decoder.ffn_ratio)
    init_decoder_params(rc.decoder, rng, store)
    state = init_queries(store, rc.decoder, rng)
    return store, state


def scene_forward(store: ParamStore, rc: RunConfig, scene: Scene,
                  collect_traces: bool = False):
    """Encode one scene and run the decoder; returns (outputs, traces)."""
    mem = encode_scene(scene, store, rc.decoder.dim, rc.decoder.temperature,
                       heads=rc.decoder.heads, attn_layer=rc.train.encoder_attention)
    state = DecoderState(
        logits=store["anchors"],
        embeddings=ad.tensor(np.zeros((rc.decoder.queries, rc.decoder.dim))),
        stage=0,
    )
    return forward(state, mem.content, mem.key_pos, store, rc.decoder,
                   collect_traces=collect_traces)


def _grad_global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def train(rc: RunConfig) -> TrainResult:
    """Train on generated scenes; returns curve, parameters and stats.

    Raises RuntimeError with the offending epoch and seed if the loss
    turns non-finite.
    """
    seeds = np.random.SeedSequence(rc.train.seed).spawn(4)
    rng_params = np.random.default_rng(seeds[0])
    rng_train = np.random.default_rng(seeds[1])
    rng_eval = np.random.default_rng(seeds[2])
    rng_shuffle = np.random.default_rng(seeds[3])

    if rc.scene.k_max > rc.decoder.queries:
        raise ValueError(
            f"queries ({rc.decoder.queries}) must cover the largest scene ({rc.scene.k_max})"
        )

    train_scenes = generate_scenes(rng_train, rc.scene, rc.train.train_scenes)
    eval_scenes = generate_scenes(rng_eval, rc.scene, rc.train.eval_scenes)
    store, _ = build_model(rc, rng_params)
    weights = loss_weights(rc)
    opt = OptState(lr=rc.train.lr, beta1=rc.train.beta1, beta2=rc.train.beta2,
                   eps=rc.train.adam_eps)

    curve = []
    t_start = time.perf_counter()
    with threadpool_limits(limits=1):
        for epoch in range(rc.train.epochs):
            t_epoch = time.perf_counter()
            if rc.train.lr_drop_epoch and epoch == rc.train.lr_drop_epoch:
                opt.lr = rc.train.lr * rc.train.lr_drop_factor
            order = rng_shuffle.permutation(len(train_scenes))
            total_loss = 0.0
            for idx in order:
                scene = train_scenes[int(idx)]
                try:
                    outputs, _ = scene_forward(store, rc, scene)
                    loss, _ = set_loss(outputs, scene.boxes, scene.classes, weights)
                    value = loss.item()
                except ad.NumericError as exc:
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} (seed {rc.train.seed}): {exc}"
                    ) from exc
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} (seed {rc.train.seed})"
                    )
                store.zero_grads()
                loss.backward()
                grads = store.grad_arrays()
                if rc.train.clip_norm:
                    norm = _grad_global_norm(grads)
                    if norm > rc.train.clip_norm:
                        scale = rc.train.clip_norm / norm
                        grads = {k: g * scale for k, g in grads.items()}
                adam_step(dict(store.items()), grads, opt)
                total_loss += value
            mean_iou, acc50 = evaluate(store, rc, eval_scenes)
            curve.append(CurvePoint(
                epoch=epoch,
                loss=total_loss / len(train_scenes),
                mean_iou=mean_iou,
                acc50=acc50,
                seconds=time.perf_counter() - t_epoch,
            ))

        stats = None
        if uses_walker(rc.decoder.mode):
            stats = collect_walker_stats(store, rc, eval_scenes)

    return TrainResult(curve=curve, store=store, config=rc, walker_stats=stats,
                       total_seconds=time.perf_counter() - t_start)


def evaluate(store: ParamStore, rc: RunConfig, scenes: list):
    """(mean matched IoU, accuracy at IoU >= 0.5 with correct class)."""
    if not scenes:
        raise ValueError("evaluate needs at least one scene")
    weights = loss_weights(rc)
    ious = []
    hits = 0
    targets = 0
    with ad.no_grad():
        for scene in scenes:
            outputs, _ = scene_forward(store, rc, scene)
            boxes, logits = outputs[-1]
            probs = ad.softmax(logits).data
            cost = match_cost_matrix(boxes.data, probs, scene.boxes, scene.classes, weights)
            pairs = hungarian(cost)
            pred_xy = geo.ccwh_to_xyxy(boxes.data).data
            tgt_xy = geo.ccwh_to_xyxy(scene.boxes).data
            for p, t in pairs:
                iou = geo.iou_xyxy(pred_xy[p], tgt_xy[t]).item()
                ious.append(iou)
                cls_ok = int(np.argmax(probs[p])) == int(scene.classes[t])
                if iou >= 0.5 and cls_ok:
                    hits += 1
            targets += scene.boxes.shape[0]
    mean_iou = float(np.mean(ious)) if ious else 0.0
    return mean_iou, (hits / targets if targets else 0.0)


def collect_walker_stats(store: ParamStore, rc: RunConfig, scenes: list) -> dict:
    """Per-stage walker statistics over a scene set (walker modes only)."""
    collector = WalkerStatsCollector(rc.decoder.mode)
    with ad.no_grad():
        for scene in scenes:
            _, traces = scene_forward(store, rc, scene, collect_traces=True)
            for trace in traces:
                if trace.walker is not None:
                    collector.add(trace.stage, trace.walker)
    return collector.summary()
