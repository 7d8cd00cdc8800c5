"""Segmentation and box losses with deep supervision."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, concat, maximum, minimum, softmax


@dataclass
class LossWeights:
    dice: float = 5.0
    focal: float = 2.0
    giou: float = 2.0
    l1: float = 5.0
    slots: float = 0.0
    referent: float = 0.0


@dataclass
class LossBreakdown:
    dice: float
    focal: float
    giou: float
    l1: float
    total: Tensor
    per_layer: List[Dict[str, float]] = field(default_factory=list)
    slots: float = 0.0
    referent: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return {
            "dice": self.dice,
            "focal": self.focal,
            "giou": self.giou,
            "l1": self.l1,
            "slots": self.slots,
            "referent": self.referent,
            "total": float(self.total.data),
        }


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(pred_prob: Tensor, gt, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(pg) + s) / (sum(p) + sum(g) + s) over the last three axes, averaged over the rest."""
    pred_prob = as_tensor(pred_prob)
    g = np.asarray(gt, dtype=pred_prob.data.dtype)
    _same_shape(pred_prob, g, "dice_loss")
    axes = (-3, -2, -1)
    inter = (pred_prob * g).sum(axis=axes)
    denom = pred_prob.sum(axis=axes) + g.sum(axis=axes) + smooth
    loss = 1.0 - (inter.scale(2.0) + smooth) / denom
    return loss.mean()


def focal_loss(pred_logit: Tensor, gt, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Binary focal loss on sigmoid probabilities, mean over all pixels."""
    x = as_tensor(pred_logit)
    y = np.asarray(gt, dtype=x.data.dtype)
    _same_shape(x, y, "focal_loss")
    p = x.sigmoid()
    ce = x.softplus() - x * y
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return ((1.0 - p_t) ** gamma * ce * alpha_t).mean()


def box_cxcywh_to_xyxy(box: Tensor) -> Tensor:
    cxcy, wh = box[..., :2], box[..., 2:]
    half = wh.scale(0.5)
    return concat([cxcy - half, cxcy + half], axis=-1)


def generalized_iou(pred_xyxy: Tensor, gt_xyxy: Tensor) -> Tensor:
    """GIoU of corner boxes along the last axis; returns [...]."""
    p, g = as_tensor(pred_xyxy), as_tensor(gt_xyxy)
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    iw = (minimum(p[..., 2], g[..., 2]) - maximum(p[..., 0], g[..., 0])).relu()
    ih = (minimum(p[..., 3], g[..., 3]) - maximum(p[..., 1], g[..., 1])).relu()
    inter = iw * ih
    union = area_p + area_g - inter
    hw = maximum(p[..., 2], g[..., 2]) - minimum(p[..., 0], g[..., 0])
    hh = maximum(p[..., 3], g[..., 3]) - minimum(p[..., 1], g[..., 1])
    hull = hw * hh
    return inter / union - (hull - union) / hull


def _check_gt_boxes(gt_box: np.ndarray) -> None:
    if np.any(gt_box[..., 2:] <= 0):
        raise ValueError("ground-truth boxes need positive width and height")


def giou_loss(pred_box: Tensor, gt_box) -> Tensor:
    """mean(1 - GIoU) for (cx, cy, w, h) boxes."""
    pred_box = as_tensor(pred_box)
    g = np.asarray(gt_box, dtype=pred_box.data.dtype)
    _same_shape(pred_box, g, "giou_loss")
    _check_gt_boxes(g)
    giou = generalized_iou(box_cxcywh_to_xyxy(pred_box), box_cxcywh_to_xyxy(Tensor(g)))
    return (1.0 - giou).mean()


def l1_loss(pred_box: Tensor, gt_box) -> Tensor:
    pred_box = as_tensor(pred_box)
    g = np.asarray(gt_box, dtype=pred_box.data.dtype)
    _same_shape(pred_box, g, "l1_loss")
    return (pred_box - g).abs().mean()


def match_slots(pred_boxes: np.ndarray, object_boxes: np.ndarray, w_giou: float = 2.0, w_l1: float = 5.0):
    """Pair slots with object tracks, one assignment for the whole clip.

    ``pred_boxes`` [T, N, 4] and ``object_boxes`` [K, T, 4]. The cost of pairing
    slot n with object k is summed over frames, so a slot is matched to a track
    rather than to a single frame's box. Exhaustive search over injective
    assignments of the smaller side, cheap for a handful of slots.

    Returns ``(objects, slots)``, index arrays of length min(K, N).
    """
    T, N, _ = pred_boxes.shape
    K = object_boxes.shape[0]
    p = box_cxcywh_to_xyxy(Tensor(np.broadcast_to(pred_boxes[None], (K, T, N, 4)).copy())).data
    g = box_cxcywh_to_xyxy(Tensor(np.broadcast_to(object_boxes[:, :, None], (K, T, N, 4)).copy())).data
    giou = generalized_iou(p, g).data
    l1 = np.abs(pred_boxes[None] - object_boxes[:, :, None]).mean(-1)
    cost = (w_giou * (1.0 - giou) + w_l1 * l1).sum(axis=1)  # [K, N]
    if K <= N:
        objs = np.arange(K)
        slots = min(itertools.permutations(range(N), K), key=lambda perm: cost[objs, perm].sum())
        return objs, np.array(slots)
    slots = np.arange(N)
    objs = min(itertools.permutations(range(K), N), key=lambda perm: cost[perm, slots].sum())
    return np.array(objs), slots


def slot_box_loss(slot_boxes: Tensor, object_boxes, w_giou: float = 2.0, w_l1: float = 5.0, matches=None) -> Tensor:
    """Box loss of every matched (object, slot) pair.

    ``slot_boxes`` [B, T, N, 4], ``object_boxes`` [B, K, T, 4]; ``matches``
    holds precomputed ``match_slots`` results per clip.
    """
    g = np.asarray(object_boxes, dtype=slot_boxes.data.dtype)
    B, T, N, _ = slot_boxes.shape
    M = min(N, g.shape[1])
    pick = np.zeros((B, 1, M, N))
    target = np.zeros((B, T, M, 4))
    for b in range(B):
        objs, slots = matches[b] if matches is not None else match_slots(slot_boxes.data[b], g[b], w_giou, w_l1)
        pick[b, 0, np.arange(M), slots] = 1.0
        target[b] = g[b, objs].transpose(1, 0, 2)
    matched = Tensor(pick) @ slot_boxes  # [B, T, M, 4]
    return giou_loss(matched, target).scale(w_giou) + l1_loss(matched, target).scale(w_l1)


def referent_targets(matches, referents) -> np.ndarray:
    """Slot matched to each clip's referent object, or -1 when it went unmatched."""
    out = np.full(len(matches), -1)
    for b, ((objs, slots), ref) in enumerate(zip(matches, referents)):
        hit = np.nonzero(np.asarray(objs) == ref)[0]
        if hit.size:
            out[b] = slots[hit[0]]
    return out


def referent_score_loss(scores: Tensor, targets: np.ndarray, tau: float = 1.0) -> Tensor:
    """Cross-entropy of softmax(scores / tau) over the last axis against target slots.

    ``scores`` [B, ..., N]; clips with target -1 are skipped and the rest are
    averaged over every leading position.
    """
    targets = np.asarray(targets)
    keep = targets >= 0
    if not keep.any():
        return Tensor(np.zeros(()))
    n = scores.shape[-1]
    onehot = np.zeros(scores.shape)
    onehot[keep, ..., targets[keep]] = 1.0
    extra = int(np.prod(scores.shape[1:-1], dtype=np.int64))
    log_prob = softmax(scores.scale(1.0 / tau), axis=-1).log()
    return (log_prob * onehot).sum().scale(-1.0 / (keep.sum() * extra))


def total_loss(
    predictions: Sequence,
    gt_masks,
    gt_boxes,
    weights: LossWeights = LossWeights(),
    object_boxes: Optional[np.ndarray] = None,
    referents: Optional[Sequence[int]] = None,
    tau: float = 1.0,
) -> LossBreakdown:
    """Equal-weight sum over layers of the four weighted terms.

    ``predictions`` holds objects with ``mask_logits`` and ``boxes``; the
    ground-truth masks must match the logits' resolution. With
    ``weights.slots > 0`` and ``object_boxes`` [B, K, T, 4], layers that carry
    per-slot boxes (``slot_boxes``) add the matched slot box loss. With
    ``weights.referent > 0`` and the referent object index of every clip, the
    layer's ``slot_scores`` are pushed towards the slot matched to the referent.
    """
    if not predictions:
        raise ValueError("need at least one layer of predictions")
    total = None
    sums = {"dice": 0.0, "focal": 0.0, "giou": 0.0, "l1": 0.0}
    slots = referent = 0.0
    per_layer = []
    for pred in predictions:
        terms = {
            "dice": dice_loss(pred.mask_logits.sigmoid(), gt_masks),
            "focal": focal_loss(pred.mask_logits, gt_masks),
            "giou": giou_loss(pred.boxes, gt_boxes),
            "l1": l1_loss(pred.boxes, gt_boxes),
        }
        layer_total = None
        for key, value in terms.items():
            weighted = value.scale(getattr(weights, key))
            layer_total = weighted if layer_total is None else layer_total + weighted
            sums[key] += float(value.data)
        total = layer_total if total is None else total + layer_total
        record = {k: float(v.data) for k, v in terms.items()}
        slot_boxes = getattr(pred, "slot_boxes", None)
        if weights.slots > 0 and object_boxes is not None and slot_boxes is not None:
            matches = [match_slots(slot_boxes.data[b], np.asarray(object_boxes[b], dtype=slot_boxes.data.dtype),
                                   weights.giou, weights.l1) for b in range(slot_boxes.shape[0])]
            aux = slot_box_loss(slot_boxes, object_boxes, weights.giou, weights.l1, matches)
            total = total + aux.scale(weights.slots)
            record["slots"] = float(aux.data)
            slots += record["slots"]
            if weights.referent > 0 and referents is not None and getattr(pred, "slot_scores", None):
                targets = referent_targets(matches, referents)
                ce = sum((referent_score_loss(s, targets, tau) for s in pred.slot_scores[1:]),
                         referent_score_loss(pred.slot_scores[0], targets, tau))
                total = total + ce.scale(weights.referent)
                record["referent"] = float(ce.data)
                referent += record["referent"]
        per_layer.append(record)
    return LossBreakdown(sums["dice"], sums["focal"], sums["giou"], sums["l1"], total, per_layer, slots, referent)
