"""Expression encoder and multimodal frame features.

These stand in for a language model and a visual backbone: the expression is a
concatenation of one-hots projected to the model width, and each frame goes
through a 3x3 convolution and a 2x2 patch merge before being gated
channel-wise by the sentence feature.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .episodes import EXPRESSION_DIM, ExpressionSpec
from .nn import Linear, Module, sine_position_encoding_2d


class ExpressionEncoder(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        self.proj = Linear(EXPRESSION_DIM, c, rng, bias=False)

    def forward(self, one_hot) -> Tensor:
        return self.proj(Tensor(np.asarray(one_hot)))


def encode_expression(spec: ExpressionSpec, encoder: ExpressionEncoder) -> Tensor:
    return encoder(spec.one_hot()[None, :]).squeeze(0)


def im2col3x3(frames: np.ndarray) -> np.ndarray:
    """[..., H, W, ch] -> [..., H*W, 9*ch] with zero padding."""
    *lead, h, w, ch = frames.shape
    pad = [(0, 0)] * len(lead) + [(1, 1), (1, 1), (0, 0)]
    padded = np.pad(frames, pad)
    cols = [padded[..., dy : dy + h, dx : dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1).reshape(*lead, h * w, 9 * ch)


class FrameEncoder(Module):
    """Conv 3x3 -> relu -> 2x2 patch merge -> sentence gate -> + position encoding."""

    def __init__(self, c: int, height: int, width: int, rng: np.random.Generator, channels: int = 3):
        if height % 2 or width % 2:
            raise ValueError("frame size must be even for the 2x2 patch merge")
        self.conv = Linear(9 * channels, c, rng)
        self.merge = Linear(4 * c, c, rng)
        self.gate = Linear(c, c, rng)
        self.c, self.height, self.width = c, height, width
        self.grid = (height // 2, width // 2)
        self.pos = sine_position_encoding_2d(self.grid[0], self.grid[1], c)

    def visual(self, frames: np.ndarray) -> Tensor:
        """Ungated patch embedding, [..., T, P, C]."""
        return self._visual(frames)[1]

    def _visual(self, frames: np.ndarray):
        frames = np.asarray(frames)
        *lead, h, w, _ = frames.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"expected {self.height}x{self.width} frames, got {h}x{w}")
        x = self.conv(Tensor(im2col3x3(frames))).relu()  # [..., H*W, C]
        gh, gw = self.grid
        pixels = x
        x = x.reshape(*lead, gh, 2, gw, 2, self.c)
        n = len(lead)
        x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
        return pixels, self.merge(x.reshape(*lead, gh * gw, 4 * self.c))

    def forward(self, frames: np.ndarray, sentence_feature: Tensor, with_position: bool = True) -> Tensor:
        return self.encode(frames, sentence_feature, with_position)[0]

    def encode(self, frames: np.ndarray, sentence_feature: Tensor, with_position: bool = True):
        """(fused [..., T, P, C], gated pixel features [..., T, H*W, C])."""
        pixels, x = self._visual(frames)
        gate = self.gate(sentence_feature).sigmoid()
        # broadcast the [..., C] gate over frames and positions
        gate = gate.expand_dims(-2).expand_dims(-2)
        x = x * gate
        fused = x + Tensor(self.pos) if with_position else x
        return fused, pixels * gate


def fuse_features(frames: np.ndarray, sentence_feature: Tensor, encoder: FrameEncoder, with_position: bool = True) -> Tensor:
    return encoder(frames, sentence_feature, with_position)
