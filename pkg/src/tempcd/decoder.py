"""Temporal collection and distribution between object queries and a referent token.

Shapes use a leading ``...`` for optional batch axes:

* object queries   ``[..., T, N, C]``
* referent token   ``[..., C]``
* frame features   ``[..., T, P, C]``

Selection steps (motion selection, per-frame referent index, head selection)
come in three flavours, controlled by ``mode``:

``"st"``       forward one-hot, backward through the softmax (straight-through)
``"relaxed"``  forward and backward both use the softmax; used by gradient checks
``"hard"``     forward one-hot, no gradient reaches the scores
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, cosine_similarity, one_hot_argmax, softmax, straight_through
from .nn import DetrDecoderLayer, LayerNorm, MLP3, Module, MultiHeadSelfAttention, param

# how often each stage ran; lets tests prove an ablation skipped a stage
CALLS: Counter = Counter()

SELECTION_MODES = ("st", "relaxed", "hard")


@dataclass
class DecoderState:
    queries: Tensor
    referent_token: Tensor
    layer_index: int = 0


@dataclass
class CollectionOutput:
    decoded_queries: Tensor
    temporal_gates: Tensor
    motions: Tensor
    scores: Tensor
    selection: Tensor
    temperature: float


@dataclass
class DistributionOutput:
    referent_sequence: Tensor
    selected_indices: np.ndarray
    updated_queries: Tensor
    cross_sequences: Tensor


def select(scores: Tensor, tau: float, mode: str = "st", noise: Optional[np.ndarray] = None) -> Tensor:
    """One-hot argmax over the last axis of ``softmax((scores + noise) / tau)``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mode not in SELECTION_MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    logits = scores if noise is None else scores + noise
    soft = softmax(logits.scale(1.0 / tau), axis=-1)
    if mode == "relaxed":
        return soft
    hard = one_hot_argmax(soft.data, axis=-1)
    if mode == "hard":
        return Tensor(hard)
    return straight_through(hard, soft)


def pick(selection: Tensor, rows: Tensor) -> Tensor:
    """selection [..., N] times rows [..., N, C] -> [..., C]."""
    return (selection.expand_dims(-2) @ rows).squeeze(-2)


def init_state(sentence_feature: Tensor, T: int, N: int, slot_embedding: Optional[Tensor] = None) -> DecoderState:
    """Broadcast the sentence feature to every (frame, slot) and add slot embeddings."""
    c = sentence_feature.shape[-1]
    lead = sentence_feature.shape[:-1]
    q = sentence_feature.reshape(*lead, 1, 1, c)
    if slot_embedding is not None:
        if slot_embedding.shape != (N, c):
            raise ValueError(f"slot embedding must be {(N, c)}, got {slot_embedding.shape}")
        q = q + slot_embedding
    q = q + Tensor(np.zeros((T, N, c)))
    return DecoderState(q, sentence_feature, 0)


def decode_frames(state: DecoderState, fused_features: Tensor, detr: DetrDecoderLayer) -> Tensor:
    """Run the DETR block on every frame independently (frames are a batch axis)."""
    t_q, t_v = state.queries.shape[-3], fused_features.shape[-3]
    if t_q != t_v:
        raise ValueError(f"state has {t_q} frames but features have {t_v}")
    CALLS["decode_frames"] += 1
    return detr(state.queries, fused_features)


def collect_motions(decoded: Tensor, W: Tensor, temporal_pos: Optional[Tensor] = None):
    """Temporal gates softmax_T(decoded @ W) and gated sums over frames.

    ``W`` is [C, 1] for one weight per frame and slot, or [C, C] for a
    separate temporal weighting of every channel.

    With ``temporal_pos`` [T, C] each frame's queries are tagged with their
    frame embedding first, so the pooled motion can depend on frame order.
    """
    CALLS["collect_motions"] += 1
    if temporal_pos is not None:
        decoded = decoded + temporal_pos.expand_dims(-2)
    gates = softmax(decoded @ W, axis=-3)
    motions = (gates * decoded).sum(axis=-3)
    return gates, motions


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.gumbel(0.0, 1.0, size=shape)


def select_referent(
    motions: Tensor,
    sentence_feature: Tensor,
    tau: float,
    rng: Optional[np.random.Generator] = None,
    mode: str = "st",
):
    """Cosine scores against the sentence and a Gumbel straight-through pick.

    ``rng=None`` disables the Gumbel noise.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    CALLS["select_referent"] += 1
    scores = cosine_similarity(motions, sentence_feature.expand_dims(-2))
    noise = None if rng is None else sample_gumbel(rng, scores.shape)
    return scores, select(scores, tau, mode, noise)


def update_referent_token(selection: Tensor, motions: Tensor, prev_token: Tensor, mlp: MLP3, norm: LayerNorm) -> Tensor:
    CALLS["update_referent_token"] += 1
    return mlp(norm(pick(selection, motions)) + prev_token)


def distribute_referent(
    decoded: Tensor, token: Tensor, mlp: MLP3, norm: LayerNorm, tau: float = 1.0, mode: str = "st"
):
    """Per-frame query most similar to the token, fused with it into the referent sequence.

    The norm is applied to the sum (query + token), unlike the token update where
    it is applied before adding the previous token.
    """
    CALLS["distribute_referent"] += 1
    sims = cosine_similarity(decoded, token.expand_dims(-2).expand_dims(-2))
    indices = np.argmax(sims.data, axis=-1)
    sel = select(sims, tau, mode)
    chosen = pick(sel, decoded)
    referent = mlp(norm(chosen + token.expand_dims(-2)))
    return indices, referent


def build_cross_sequences(decoded: Tensor, referent_sequence: Tensor) -> Tensor:
    """C[..., i, j, t] = decoded[..., i, j] if t == i else referent_sequence[..., t].

    Returns [..., T, N, T, C]: T*N sequences of length T.
    """
    T, N, c = decoded.shape[-3:]
    eye = np.eye(T).reshape(T, 1, T, 1)
    lead = decoded.shape[:-3]
    own = decoded.reshape(*lead, T, N, 1, c) * Tensor(eye)
    others = referent_sequence.reshape(*lead, 1, 1, T, c) * Tensor(1.0 - eye)
    return own + others


def cross_frame_reasoning(
    decoded: Tensor,
    referent_sequence: Tensor,
    attn: MultiHeadSelfAttention,
    temporal_pos: Optional[Tensor] = None,
):
    """Self-attention inside every cross-object sequence; query (i, j) reads position i."""
    CALLS["cross_frame_reasoning"] += 1
    T = decoded.shape[-3]
    seqs = build_cross_sequences(decoded, referent_sequence)
    CALLS["cross_sequences"] += T * decoded.shape[-2]
    pos = None if temporal_pos is None else temporal_pos[:T]
    out = attn(seqs, pos)
    eye = Tensor(np.eye(T).reshape(T, 1, T, 1))
    updated = (out * eye).sum(axis=-2)
    return updated, out


GATES = ("scalar", "channel")


class TempCDLayer(Module):
    def __init__(
        self,
        c: int,
        heads: int,
        ffn_hidden: int,
        mlp_hidden: int,
        max_frames: int,
        rng: np.random.Generator,
        gate: str = "scalar",
    ):
        if gate not in GATES:
            raise ValueError(f"gate must be one of {GATES}, got {gate!r}")
        self.detr = DetrDecoderLayer(c, heads, ffn_hidden, rng)
        self.gate_w = param(rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, 1 if gate == "scalar" else c)))
        self.token_norm = LayerNorm(c)
        self.token_mlp = MLP3(c, mlp_hidden, c, rng)
        self.ref_norm = LayerNorm(c)
        self.ref_mlp = MLP3(c, mlp_hidden, c, rng)
        self.cross_attn = MultiHeadSelfAttention(c, heads, rng)
        self.temporal_pos = param(rng.normal(0.0, 0.1, size=(max_frames, c)))


def run_layer(
    state: DecoderState,
    fused_features: Tensor,
    sentence_feature: Tensor,
    layer: TempCDLayer,
    tau: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    mode: str = "st",
    ablation: str = "full",
):
    """One decoder layer: decode, collect into the token, distribute back to queries.

    With ``ablation="local_query"`` only the per-frame decoding runs and the
    token is carried through unchanged.
    """
    decoded = decode_frames(state, fused_features, layer.detr)
    if ablation == "local_query":
        return DecoderState(decoded, state.referent_token, state.layer_index + 1), None, None
    T = decoded.shape[-3]
    gates, motions = collect_motions(decoded, layer.gate_w, layer.temporal_pos[:T])
    sel_mode = "hard" if ablation == "no_gumbel_topk" else mode
    scores, selection = select_referent(motions, sentence_feature, tau, rng, sel_mode)
    token = update_referent_token(selection, motions, state.referent_token, layer.token_mlp, layer.token_norm)
    indices, referent = distribute_referent(decoded, token, layer.ref_mlp, layer.ref_norm, tau, mode)
    updated, seqs = cross_frame_reasoning(decoded, referent, layer.cross_attn, layer.temporal_pos)
    collection = CollectionOutput(decoded, gates, motions, scores, selection, tau)
    distribution = DistributionOutput(referent, indices, updated, seqs)
    return DecoderState(updated, token, state.layer_index + 1), collection, distribution
