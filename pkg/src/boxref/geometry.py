"""Box representations, overlap metrics, and logit/coordinate maps.

Boxes are (..., 4) arrays in one of two layouts:

* ccwh -- (cx, cy, w, h), normalized to the unit square.  This is the
  anchor-query layout refined stage by stage.
* xyxy -- (x0, y0, x1, y1) corners, used for IoU/GIoU.

All functions accept either autodiff Tensors or plain arrays and are
differentiable when given Tensors.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Clamp applied to w/h before they are used to place agent points, so a
# collapsed box cannot pin every reference to a single point.
MIN_BOX_SIDE = 1e-4

# Default clamp for the logit map; matches common anchor-refinement practice.
INVERSE_SIGMOID_EPS = 1e-3


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.tensor(x)


def ccwh_to_xyxy(box) -> Tensor:
    """(cx, cy, w, h) -> (x0, y0, x1, y1) along the last axis."""
    box = _t(box)
    c = box[..., 0:2]
    half = box[..., 2:4] * 0.5
    return ad.concat([c - half, c + half], axis=-1)


def xyxy_to_ccwh(box) -> Tensor:
    """Inverse of ccwh_to_xyxy."""
    box = _t(box)
    lo = box[..., 0:2]
    hi = box[..., 2:4]
    return ad.concat([(lo + hi) * 0.5, hi - lo], axis=-1)


def box_l1(a, b) -> Tensor:
    """Sum of absolute differences over the four ccwh fields."""
    a, b = _t(a), _t(b)
    return ad.absolute(a - b).sum(axis=-1)


def iou_xyxy(a, b) -> Tensor:
    """Intersection over union of corner-form boxes (broadcasts)."""
    inter, union = _inter_union(_t(a), _t(b))
    return inter / ad.maximum(union, 1e-12)


def _inter_union(a: Tensor, b: Tensor):
    lo = ad.maximum(a[..., 0:2], b[..., 0:2])
    hi = ad.minimum(a[..., 2:4], b[..., 2:4])
    wh = ad.relu(hi - lo)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter, area_a + area_b - inter


def giou_xyxy(a, b) -> Tensor:
    """Generalized IoU: IoU - (hull - union)/hull, in (-1, 1].

    When both boxes have zero area the hull is degenerate; the result is
    defined as 0 with zero gradient through the degenerate terms (the
    denominators are clamped away from zero).
    """
    a, b = _t(a), _t(b)
    inter, union = _inter_union(a, b)
    iou = inter / ad.maximum(union, 1e-12)
    lo = ad.minimum(a[..., 0:2], b[..., 0:2])
    hi = ad.maximum(a[..., 2:4], b[..., 2:4])
    hull_wh = ad.relu(hi - lo)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return iou - (hull - union) / ad.maximum(hull, 1e-12)


def giou_ccwh(a, b) -> Tensor:
    return giou_xyxy(ccwh_to_xyxy(a), ccwh_to_xyxy(b))


def inverse_sigmoid(p, eps: float = INVERSE_SIGMOID_EPS) -> Tensor:
    """ln(p'/(1-p')) with p' = clamp(p, eps, 1-eps)."""
    return ad.logit_clamped(_t(p), eps)


def clamp_min_wh(box) -> Tensor:
    """Return ccwh box with w, h clamped to at least MIN_BOX_SIDE."""
    box = _t(box)
    return ad.concat([box[..., 0:2], ad.maximum(box[..., 2:4], MIN_BOX_SIDE)], axis=-1)


def validate_ccwh(box) -> None:
    """Raise if any ccwh field leaves [0, 1] or any size is negative."""
    arr = box.data if isinstance(box, Tensor) else np.asarray(box, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ad.ShapeError(f"ccwh box must have 4 trailing fields, got {arr.shape}")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("ccwh box fields must lie in [0, 1]")
