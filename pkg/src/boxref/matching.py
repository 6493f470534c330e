"""Bipartite matching between predictions and targets, and the set loss.

The matcher assigns every target to a distinct prediction so that the
summed cost is minimal.  Among equal-cost optima the returned pair list
(sorted by prediction index) is lexicographically smallest by
(prediction index, target index); ties are resolved with exactly-rounded
sums (math.fsum), so the canonical choice is stable for any inputs whose
optimal totals are genuinely equal.

The loss follows set-prediction practice: classification cross-entropy
with an explicit no-object class over all queries, plus L1 and GIoU
regression on the matched pairs, normalized by the target count and
summed over decoder stages (each stage re-matched independently).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor


def _pairs_total(cost: np.ndarray, pairs) -> float:
    return math.fsum(float(cost[p, t]) for p, t in pairs)


def _augmenting_path_solve(cost: np.ndarray) -> list[tuple[int, int]]:
    """Shortest-augmenting-path assignment (Jonker-Volgenant potentials).

    cost is (P, T) with P >= T; returns T (prediction, target) pairs.
    Deterministic: scan order breaks ties toward lower indices.
    """
    P, T = cost.shape
    INF = np.inf
    # internal layout: rows = targets (few), columns = predictions
    u = np.zeros(T + 1)
    v = np.zeros(P + 1)
    col_match = np.zeros(P + 1, dtype=np.intp)  # 1-based target matched to column, 0 = free
    way = np.zeros(P + 1, dtype=np.intp)
    for i in range(1, T + 1):
        col_match[0] = i
        j0 = 0
        minv = np.full(P + 1, INF)
        used = np.zeros(P + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_match[j0]
            row_cost = cost[:, i0 - 1]  # costs of target i0 against all predictions
            free = ~used[1:]
            cur = row_cost - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            if np.any(better):
                minv[1:][better] = cur[better]
                way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            if not np.isfinite(delta):
                raise ValueError("assignment infeasible (non-finite costs?)")
            u[col_match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if col_match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            col_match[j0] = col_match[j1]
            j0 = j1
    return sorted((j - 1, int(col_match[j]) - 1) for j in range(1, P + 1) if col_match[j] != 0)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of targets (columns) to predictions (rows).

    cost: (P, T) array with P >= T and finite entries.  Returns
    min(P, T) pairs sorted by prediction index, canonicalized to the
    lexicographically smallest optimal assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ad.ShapeError(f"cost matrix must be 2-D, got shape {cost.shape}")
    P, T = cost.shape
    if P < T:
        raise ValueError(f"need at least as many predictions as targets, got {P} < {T}")
    if T == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    base = _augmenting_path_solve(cost)
    best_total = _pairs_total(cost, base)

    # Greedy canonicalization: walk candidate pairs in lexicographic order
    # and keep a pair whenever some optimal completion contains it.  Sums
    # are exactly rounded, so this is exact whenever optimal totals tie.
    fixed: list[tuple[int, int]] = []
    remaining = list(range(T))
    for p in range(P):
        if not remaining:
            break
        preds_left = P - p - 1
        for t in remaining:
            rest = [x for x in remaining if x != t]
            if len(rest) > preds_left:
                continue
            if rest:
                sub = cost[p + 1:, :][:, rest]
                try:
                    sub_pairs = _augmenting_path_solve(sub)
                except ValueError:
                    continue
                completion = [(p + 1 + sp, rest[st]) for sp, st in sub_pairs]
            else:
                completion = []
            candidate = fixed + [(p, t)] + completion
            if _pairs_total(cost, candidate) == best_total:
                fixed.append((p, t))
                remaining = rest
                break
        if len(remaining) > preds_left:
            # float noise defeated the equality test; keep the base solution
            return base
    if len(fixed) == T and _pairs_total(cost, fixed) == best_total:
        return fixed
    return base


def brute_force(cost) -> list[tuple[int, int]]:
    """Exhaustive assignment oracle for min(P, T) <= 8.

    Enumerates every injection of targets into predictions; among ties
    returns the lexicographically smallest pair list.
    """
    cost = np.asarray(cost, dtype=np.float64)
    P, T = cost.shape
    if P < T:
        raise ValueError(f"need at least as many predictions as targets, got {P} < {T}")
    if min(P, T) > 8:
        raise ValueError(f"brute_force limited to min(P, T) <= 8, got {cost.shape}")
    if T == 0:
        return []
    best_total = math.inf
    best_pairs: list[list[tuple[int, int]]] = []
    for perm in itertools.permutations(range(P), T):
        total = math.fsum(float(cost[perm[t], t]) for t in range(T))
        if total < best_total:
            best_total = total
            best_pairs = [sorted(zip(perm, range(T)))]
        elif total == best_total:
            best_pairs.append(sorted(zip(perm, range(T))))
    return min(best_pairs)


@dataclass
class LossWeights:
    """Term weights for the matching cost and the training loss."""

    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = 0.1  # class-term weight on unmatched queries


def match_cost_matrix(boxes: np.ndarray, class_probs: np.ndarray,
                      t_boxes: np.ndarray, t_classes: np.ndarray,
                      weights: LossWeights) -> np.ndarray:
    """(P, T) matching cost: -p(class) + L1 + (1 - GIoU), weighted."""
    P = boxes.shape[0]
    T = t_boxes.shape[0]
    cls_cost = -class_probs[:, np.asarray(t_classes, dtype=np.intp)]
    l1 = np.abs(boxes[:, None, :] - t_boxes[None, :, :]).sum(axis=-1)
    g = geo.giou_ccwh(boxes.reshape(P, 1, 4), t_boxes.reshape(1, T, 4)).data
    return weights.cls * cls_cost + weights.l1 * l1 + weights.giou * (1.0 - g)


def stage_loss(boxes: Tensor, class_logits: Tensor, t_boxes: np.ndarray,
               t_classes: np.ndarray, weights: LossWeights,
               assignment: list[tuple[int, int]] | None = None):
    """Loss for one stage's predictions; returns (loss, assignment)."""
    N = boxes.data.shape[0]
    C_no_obj = class_logits.data.shape[1] - 1
    T = int(t_boxes.shape[0]) if t_boxes is not None else 0

    if T == 0:
        target_full = np.full(N, C_no_obj, dtype=np.intp)
        row_w = np.full(N, weights.no_object)
        cls = ad.softmax_cross_entropy(class_logits, target_full, row_w)
        return weights.cls * cls, []

    if assignment is None:
        with ad.no_grad():
            probs = ad.softmax(class_logits).data
        cost = match_cost_matrix(boxes.data, probs, t_boxes, t_classes, weights)
        assignment = hungarian(cost)

    pred_idx = np.array([p for p, _ in assignment], dtype=np.intp)
    tgt_idx = np.array([t for _, t in assignment], dtype=np.intp)

    target_full = np.full(N, C_no_obj, dtype=np.intp)
    target_full[pred_idx] = np.asarray(t_classes, dtype=np.intp)[tgt_idx]
    row_w = np.full(N, weights.no_object)
    row_w[pred_idx] = 1.0
    cls = ad.softmax_cross_entropy(class_logits, target_full, row_w)

    matched = ad.take_rows(boxes, pred_idx)
    tb = ad.tensor(np.asarray(t_boxes, dtype=np.float64)[tgt_idx])
    l1 = geo.box_l1(matched, tb).sum()
    giou_term = (1.0 - geo.giou_ccwh(matched, tb)).sum()

    loss = (weights.cls * cls + weights.l1 * l1 + weights.giou * giou_term) * (1.0 / T)
    return loss, assignment


def set_loss(stage_predictions, t_boxes, t_classes, weights: LossWeights | None = None,
             assignments=None):
    """Total loss over decoder stages (each stage matched independently).

    stage_predictions: iterable of (boxes Tensor (N,4), class_logits
    Tensor (N,C+1)); assignments: optional per-stage fixed matchings
    (used by gradient checks to keep the loss smooth).
    Returns (scalar Tensor, per-stage assignments).
    """
    weights = weights or LossWeights()
    total = None
    used = []
    for s, (boxes, logits) in enumerate(stage_predictions):
        fixed = assignments[s] if assignments is not None else None
        loss, pairs = stage_loss(boxes, logits, t_boxes, t_classes, weights, fixed)
        used.append(pairs)
        total = loss if total is None else total + loss
    if total is None:
        raise ValueError("set_loss needs at least one stage of predictions")
    return total, used
