"""Neural building blocks: linear layers, MLPs, attention and the DETR decoder block."""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, get_dtype, layer_norm, softmax


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=get_dtype()), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(xavier(rng, n_in, n_out))
        self.bias = param(np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        if x.ndim == 1:
            y = (x.expand_dims(0) @ self.weight).squeeze(0)
        else:
            y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gain = param(np.ones(c))
        self.bias = param(np.zeros(c))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MLP3(Module):
    """linear -> relu -> linear -> relu -> linear."""

    def __init__(self, c_in: int, hidden: int, c_out: int, rng: np.random.Generator):
        self.layers = [Linear(c_in, hidden, rng), Linear(hidden, hidden, rng), Linear(hidden, c_out, rng)]

    def forward(self, x: Tensor) -> Tensor:
        a, b, c = self.layers
        return c(b(a(x).relu()).relu())


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, c = x.shape
    return x.reshape(*lead, s, heads, c // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, s, h * d)


class Attention(Module):
    """Multi-head scaled dot-product attention (no residual, no norm).

    Positional terms are added to queries and keys only; values see the raw
    inputs.
    """

    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        if c % heads:
            raise ValueError(f"width {c} is not divisible by {heads} heads")
        self.c, self.heads = c, heads
        self.q_proj = Linear(c, c, rng)
        self.k_proj = Linear(c, c, rng)
        self.v_proj = Linear(c, c, rng)
        self.out_proj = Linear(c, c, rng)

    def forward(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        q_pos: Optional[Tensor] = None,
        k_pos: Optional[Tensor] = None,
        return_weights: bool = False,
    ):
        if x_q.shape[-1] != self.c or x_kv.shape[-1] != self.c:
            raise ShapeError(f"attention width {self.c} does not match {x_q.shape} / {x_kv.shape}")
        q_in = x_q if q_pos is None else x_q + q_pos
        k_in = x_kv if k_pos is None else x_kv + k_pos
        q = _split_heads(self.q_proj(q_in), self.heads)
        k = _split_heads(self.k_proj(k_in), self.heads)
        v = _split_heads(self.v_proj(x_kv), self.heads)
        scale = 1.0 / math.sqrt(self.c // self.heads)
        weights = softmax((q @ k.swapaxes(-1, -2)).scale(scale), axis=-1)
        out = self.out_proj(_merge_heads(weights @ v))
        if return_weights:
            return out, weights
        return out


class MultiHeadSelfAttention(Module):
    """Self-attention with post-norm residual: LayerNorm(x + Attn(x))."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        self.attn = Attention(c, heads, rng)
        self.norm = LayerNorm(c)

    def forward(self, x: Tensor, pos: Optional[Tensor] = None, prenorm: bool = False) -> Tensor:
        y = x + self.attn(x, x, pos, pos)
        return y if prenorm else self.norm(y)


def mhsa(x: Tensor, p: MultiHeadSelfAttention, pos: Optional[Tensor] = None) -> Tensor:
    return p(x, pos)


class FeedForward(Module):
    def __init__(self, c: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(c, hidden, rng)
        self.fc2 = Linear(hidden, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class DetrDecoderLayer(Module):
    """One DETR decoder block: self-attn over queries, cross-attn to features, FFN.

    Every sublayer is residual followed by LayerNorm.
    """

    def __init__(self, c: int, heads: int, ffn_hidden: int, rng: np.random.Generator):
        self.self_attn = MultiHeadSelfAttention(c, heads, rng)
        self.cross_attn = Attention(c, heads, rng)
        self.cross_norm = LayerNorm(c)
        self.ffn = FeedForward(c, ffn_hidden, rng)
        self.ffn_norm = LayerNorm(c)

    def forward(self, q: Tensor, v: Tensor, return_weights: bool = False):
        q = self.self_attn(q)
        ca, weights = self.cross_attn(q, v, return_weights=True)
        q = self.cross_norm(q + ca)
        q = self.ffn_norm(q + self.ffn(q))
        return (q, weights) if return_weights else q


def detr_decode_frame(q: Tensor, v: Tensor, p: DetrDecoderLayer) -> Tensor:
    """Decode queries ``q`` [..., N, C] against one frame's features ``v`` [..., P, C]."""
    return p(q, v)


def sine_position_encoding_2d(h: int, w: int, c: int, temperature: float = 10000.0) -> np.ndarray:
    """DETR-style 2-D sinusoidal encoding, shape [h*w, c]; half the channels per axis."""
    if c % 4:
        raise ValueError(f"2-D sine encoding needs width divisible by 4, got {c}")
    quarter = c // 4
    freqs = temperature ** (np.arange(quarter) / quarter)
    ys = (np.arange(h) + 0.5) / h * 2 * math.pi
    xs = (np.arange(w) + 0.5) / w * 2 * math.pi
    ey = ys[:, None] / freqs[None, :]
    ex = xs[:, None] / freqs[None, :]
    py = np.concatenate([np.sin(ey), np.cos(ey)], axis=1)
    px = np.concatenate([np.sin(ex), np.cos(ex)], axis=1)
    grid = np.concatenate(
        [np.repeat(py[:, None, :], w, axis=1), np.repeat(px[None, :, :], h, axis=0)], axis=2
    )
    return grid.reshape(h * w, c)
