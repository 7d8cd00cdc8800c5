"""Prediction heads: final referent sequence, mask logits and boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .autodiff import Tensor, cosine_similarity, softmax
from .decoder import DistributionOutput, pick, select
from .nn import LayerNorm, Linear, MLP3, Module, param


@dataclass
class PredictionSet:
    final_referent: Tensor
    mask_logits: Tensor  # [..., T, H', W']
    boxes: Tensor  # [..., T, 4] as (cx, cy, w, h)
    head_indices: np.ndarray
    per_layer: List["PredictionSet"] = field(default_factory=list)
    slot_boxes: Optional[Tensor] = None  # [..., T, N, 4] from every object query
    slot_scores: List[Tensor] = field(default_factory=list)  # referent scores [B, ..., N] over slots


class ReferentHead(Module):
    def __init__(self, c: int, mlp_hidden: int, rng: np.random.Generator):
        self.gate_w = param(rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, 1)))
        self.norm = LayerNorm(c)
        self.mlp = MLP3(c, mlp_hidden, c, rng)


def final_referent(
    distribution: Optional[DistributionOutput],
    sentence_feature: Tensor,
    head: ReferentHead,
    queries: Optional[Tensor] = None,
    tau: float = 1.0,
    mode: str = "st",
    return_scores: bool = False,
):
    """Score each object's cross-object sequence, pick one per frame, fuse with r_i.

    Each sequence is pooled over its T positions with learned temporal gates and
    compared to the sentence feature by cosine. Without a distribution (local
    query ablation) the decoded ``queries`` are scored directly and the
    sentence feature stands in for the referent sequence.

    Returns ``(final_referent [..., T, C], head_indices [..., T])``, plus the
    scores [..., T, N] when ``return_scores`` is set.
    """
    if distribution is None:
        if queries is None:
            raise ValueError("queries are required when no distribution output is given")
        pooled = queries
        candidates = queries
        referent = sentence_feature.expand_dims(-2)
    else:
        seqs = distribution.cross_sequences
        gates = softmax(seqs @ head.gate_w, axis=-2)
        pooled = (gates * seqs).sum(axis=-2)
        candidates = distribution.updated_queries
        referent = distribution.referent_sequence
    scores = cosine_similarity(pooled, sentence_feature.expand_dims(-2).expand_dims(-2))
    indices = np.argmax(scores.data, axis=-1)
    chosen = pick(select(scores, tau, mode), candidates)
    final = head.mlp(head.norm(referent + chosen))
    return (final, indices, scores) if return_scores else (final, indices)


class SegmentationHead(Module):
    """logit(t, p) = <proj_q(R_t), proj_v(v_t[p])> / sqrt(C).

    Given ``pixels`` [..., T, H*W, C] the keys are computed per pixel from
    ``pixels`` plus the nearest-upsampled features, and the logits come out at
    full resolution ``size``.
    """

    def __init__(self, c: int, rng: np.random.Generator):
        self.proj_q = Linear(c, c, rng)
        self.proj_v = Linear(c, c, rng)
        self.c = c

    def forward(self, referent: Tensor, features: Tensor, grid: tuple, pixels: Optional[Tensor] = None, size=None) -> Tensor:
        h, w = grid
        if features.shape[-2] != h * w:
            raise ValueError(f"features have {features.shape[-2]} positions, expected {h}x{w}")
        if pixels is not None:
            if size is None:
                raise ValueError("size is required with pixel features")
            features = pixels + Tensor(nearest_matrix(size, grid)) @ features
            h, w = size
        q = self.proj_q(referent).expand_dims(-1)  # [..., T, C, 1]
        k = self.proj_v(features)  # [..., T, P, C]
        logits = (k @ q).squeeze(-1).scale(1.0 / math.sqrt(self.c))
        return logits.reshape(*logits.shape[:-1], h, w)


def segmentation_head(referent: Tensor, features: Tensor, head: SegmentationHead, grid: tuple) -> Tensor:
    return head(referent, features, grid)


class BoxHead(Module):
    def __init__(self, c: int, mlp_hidden: int, rng: np.random.Generator):
        self.mlp = MLP3(c, mlp_hidden, 4, rng)

    def forward(self, referent: Tensor) -> Tensor:
        return self.mlp(referent).sigmoid()


def box_head(referent: Tensor, head: BoxHead) -> Tensor:
    return head(referent)


def nearest_matrix(size: tuple, grid: tuple) -> np.ndarray:
    """[H*W, h*w] 0/1 matrix copying each grid cell to the pixels it covers."""
    (hh, ww), (gh, gw) = size, grid
    ys = np.arange(hh) * gh // hh
    xs = np.arange(ww) * gw // ww
    src = (ys[:, None] * gw + xs[None, :]).reshape(-1)
    m = np.zeros((hh * ww, gh * gw))
    m[np.arange(hh * ww), src] = 1.0
    return m


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """[n_out, n_in] interpolation weights with half-pixel centres and edge clamping."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(logits: Tensor, size: tuple) -> Tensor:
    """Resize the last two axes of ``logits`` to ``size`` (linear, so differentiable)."""
    h_in, w_in = logits.shape[-2:]
    uh = Tensor(bilinear_matrix(size[0], h_in))
    uw = Tensor(bilinear_matrix(size[1], w_in).T)
    return uh @ logits @ uw
