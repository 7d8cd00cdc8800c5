"""End-to-end referring segmentation model around the temporal decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, cosine_similarity
from .config import Config
from .decoder import (
    CollectionOutput,
    DecoderState,
    DistributionOutput,
    TempCDLayer,
    init_state,
    pick,
    run_layer,
    select,
)
from .episodes import Episode
from .fusion import ExpressionEncoder, FrameEncoder
from .heads import BoxHead, PredictionSet, ReferentHead, SegmentationHead, final_referent, upsample_bilinear
from .nn import Module, param


@dataclass
class ModelOutput:
    predictions: List[PredictionSet]
    sentence_feature: Tensor
    features: Tensor
    pixels: Optional[Tensor] = None
    states: List[DecoderState] = field(default_factory=list)
    collections: List[Optional[CollectionOutput]] = field(default_factory=list)
    distributions: List[Optional[DistributionOutput]] = field(default_factory=list)

    @property
    def final(self) -> PredictionSet:
        return self.predictions[-1]


class TempCDModel(Module):
    def __init__(self, cfg: Config):
        m, d = cfg.model, cfg.data
        self.cfg = cfg
        rng = np.random.default_rng(m.seed)
        self.expression = ExpressionEncoder(m.C, rng)
        self.frames = FrameEncoder(m.C, d.H, d.W, rng)
        self.slot_embed = param(rng.normal(0.0, 0.5, size=(m.N, m.C)))
        self.layers = [TempCDLayer(m.C, m.heads, m.ffn_hidden, m.H_mlp, d.T, rng, m.gate) for _ in range(m.L)]
        self.referent_head = ReferentHead(m.C, m.H_mlp, rng)
        self.seg_head = SegmentationHead(m.C, rng)
        self.box_head = BoxHead(m.C, m.H_mlp, rng)

    @property
    def ablation(self) -> str:
        return self.cfg.ablation

    def forward(
        self,
        frames: np.ndarray,
        expressions: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        mode: str = "st",
    ) -> ModelOutput:
        """``frames`` [B, T, H, W, 3], ``expressions`` one-hot [B, 11].

        ``rng`` supplies Gumbel noise for the motion selection; ``None`` turns it off.
        """
        frames = np.asarray(frames)
        expressions = np.asarray(expressions)
        if frames.ndim == 4:
            frames, expressions = frames[None], expressions[None]
        tau = self.cfg.model.tau
        fs = self.expression(expressions)
        feats, pixels = self.frames.encode(frames, fs)
        grid = self.frames.grid
        T = frames.shape[1]
        out = ModelOutput([], fs, feats, pixels if self.cfg.model.mask_features == "pixel" else None)

        if self.ablation == "global_query":
            return self._forward_global(out, fs, feats, T, grid, mode)

        state = init_state(fs, T, self.cfg.model.N, self.slot_embed)
        out.states.append(state)
        for layer in self.layers:
            state, coll, dist = run_layer(state, feats, fs, layer, tau, rng, mode, self.ablation)
            out.states.append(state)
            out.collections.append(coll)
            out.distributions.append(dist)
            ref, idx, head_scores = final_referent(
                dist, fs, self.referent_head, queries=state.queries, tau=tau, mode=mode, return_scores=True)
            pred = self._heads(ref, out, grid, idx)
            if self.cfg.loss.slots > 0:
                pred.slot_boxes = self.box_head(state.queries)
                pred.slot_scores = [head_scores] if coll is None else [coll.scores, head_scores]
            out.predictions.append(pred)
        return out

    def _forward_global(self, out, fs, feats, T, grid, mode):
        # one shared query set decoded against every frame's positions at once
        b, _, p, c = feats.shape
        video = feats.reshape(b, T * p, c)
        q = fs.expand_dims(-2) + self.slot_embed
        tau = self.cfg.model.tau
        head = self.referent_head
        for layer in self.layers:
            q = layer.detr(q, video)
            scores = cosine_similarity(q, fs.expand_dims(-2))
            idx = np.argmax(scores.data, axis=-1)
            chosen = pick(select(scores, tau, mode), q)
            ref = head.mlp(head.norm(fs + chosen)).expand_dims(-2) + Tensor(np.zeros((T, c)))
            out.predictions.append(self._heads(ref, out, grid, np.repeat(idx[:, None], T, axis=1)))
        return out

    def _heads(self, referent, out, grid, idx) -> PredictionSet:
        size = (self.cfg.data.H, self.cfg.data.W)
        logits = self.seg_head(referent, out.features, grid, out.pixels, size)
        boxes = self.box_head(referent)
        return PredictionSet(referent, logits, boxes, idx)

    # -- convenience -----------------------------------------------------
    def mask_logits_full(self, pred: PredictionSet) -> Tensor:
        if pred.mask_logits.shape[-2:] == (self.cfg.data.H, self.cfg.data.W):
            return pred.mask_logits
        return upsample_bilinear(pred.mask_logits, (self.cfg.data.H, self.cfg.data.W))

    def predict_masks(self, episodes: Sequence[Episode], threshold: Optional[float] = None) -> np.ndarray:
        """Deterministic binary masks [B, T, H, W] from the last layer."""
        from .metrics import binarize

        threshold = self.cfg.eval.threshold if threshold is None else threshold
        frames, expr = batch_inputs(episodes)
        rng = np.random.default_rng(0) if self.cfg.model.gumbel_at_eval else None
        out = self.forward(frames, expr, rng=rng, mode="st")
        return binarize(self.mask_logits_full(out.final).data, threshold)


def batch_inputs(episodes: Sequence[Episode]):
    frames = np.stack([ep.frames for ep in episodes])
    expr = np.stack([ep.expression.one_hot() for ep in episodes])
    return frames, expr


def downsample_masks(masks: np.ndarray, factor: int = 2, threshold: float = 0.5) -> np.ndarray:
    """Area-threshold downsampling: a cell is foreground when >= ``threshold`` of it is covered."""
    *lead, h, w = masks.shape
    cells = masks.reshape(*lead, h // factor, factor, w // factor, factor).astype(np.float64)
    return (cells.mean(axis=(-3, -1)) >= threshold).astype(np.float64)
