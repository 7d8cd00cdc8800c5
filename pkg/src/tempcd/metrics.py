"""Video segmentation metrics: region J, boundary F, J&F, overall and mean IoU."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import numpy as np


@dataclass
class MetricsReport:
    j: float
    f: float
    jf: float
    oiou: float
    miou: float
    per_frame_j: List[float] = field(default_factory=list)
    per_frame_f: List[float] = field(default_factory=list)

    def to_text(self) -> str:
        keys = ("j", "f", "jf", "oiou", "miou")
        return "".join(f"{k}={getattr(self, k):.6f}\n" for k in keys)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def binarize(mask_logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """sigmoid(logit) >= threshold; exactly 0.5 counts as foreground."""
    logits = np.asarray(mask_logits, dtype=np.float64)
    prob = np.empty_like(logits)
    pos = logits >= 0
    prob[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ex = np.exp(logits[~pos])
    prob[~pos] = ex / (1.0 + ex)
    return (prob >= threshold).astype(np.uint8)


def region_j(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    _check(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    m = np.asarray(mask, bool)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _disk_offsets(radius: int):
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean disk of ``radius`` pixels."""
    m = np.asarray(mask, bool)
    h, w = m.shape
    out = np.zeros_like(m)
    p = np.pad(m, radius)
    for dy, dx in _disk_offsets(radius):
        out |= p[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance_px: int = 1) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    _check(pred, gt)
    bp, bg = boundary_map(pred), boundary_map(gt)
    n_p, n_g = bp.sum(), bg.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = (bp & dilate(bg, tolerance_px)).sum() / n_p
    recall = (bg & dilate(bp, tolerance_px)).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def sequence_metrics(pred_seq: Sequence[np.ndarray], gt_seq: Sequence[np.ndarray], tolerance: int = 1) -> MetricsReport:
    if len(pred_seq) != len(gt_seq):
        raise ValueError(f"sequence lengths differ: {len(pred_seq)} vs {len(gt_seq)}")
    js = [region_j(p, g) for p, g in zip(pred_seq, gt_seq)]
    fs = [boundary_f(p, g, tolerance) for p, g in zip(pred_seq, gt_seq)]
    inter = sum(int(np.logical_and(np.asarray(p, bool), np.asarray(g, bool)).sum()) for p, g in zip(pred_seq, gt_seq))
    union = sum(int(np.logical_or(np.asarray(p, bool), np.asarray(g, bool)).sum()) for p, g in zip(pred_seq, gt_seq))
    j, f = float(np.mean(js)), float(np.mean(fs))
    oiou = 1.0 if union == 0 else inter / union
    return MetricsReport(j, f, (j + f) / 2, oiou, float(np.mean(js)), js, fs)


def aggregate(reports: Sequence[MetricsReport], inter_union: Sequence[tuple] = ()) -> MetricsReport:
    """Mean of per-sequence J/F/mIoU; oIoU pooled from (inter, union) pairs when given."""
    if not reports:
        raise ValueError("nothing to aggregate")
    j = float(np.mean([r.j for r in reports]))
    f = float(np.mean([r.f for r in reports]))
    miou = float(np.mean([v for r in reports for v in r.per_frame_j]))
    if inter_union:
        i = sum(a for a, _ in inter_union)
        u = sum(b for _, b in inter_union)
        oiou = 1.0 if u == 0 else i / u
    else:
        oiou = float(np.mean([r.oiou for r in reports]))
    return MetricsReport(j, f, (j + f) / 2, oiou, miou,
                         [v for r in reports for v in r.per_frame_j],
                         [v for r in reports for v in r.per_frame_f])


def inter_union(pred_seq, gt_seq) -> tuple:
    p, g = np.asarray(pred_seq, bool), np.asarray(gt_seq, bool)
    return int(np.logical_and(p, g).sum()), int(np.logical_or(p, g).sum())
