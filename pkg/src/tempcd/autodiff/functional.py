"""Fused differentiable ops with hand-written backward rules."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _unbroadcast, as_tensor, broadcast_shape

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch table for the elementwise ops by name."""
    a = as_tensor(a)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "scale":
        return a.scale(float(b))
    if op == "relu":
        return a.relu()
    if op == "sigmoid":
        return a.sigmoid()
    if op == "exp":
        return a.exp()
    if op == "log":
        return a.log()
    raise ValueError(f"unknown elementwise op {op!r}")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit biased variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm width {c} does not match gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = gain.data
    out = xhat * w + bias.data

    def back(g):
        dxhat = g * w
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gain, bias), back)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """cos along the last axis with ``eps`` added to each norm; broadcasts leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity lengths differ: {a.shape} vs {b.shape}")
    broadcast_shape(a.shape, b.shape)
    A, B = a.data, b.data
    na = np.sqrt((A * A).sum(axis=-1, keepdims=True))
    nb = np.sqrt((B * B).sum(axis=-1, keepdims=True))
    da, db = na + eps, nb + eps
    dot = (A * B).sum(axis=-1, keepdims=True)
    out = dot / (da * db)
    # unit vectors with 0 at the origin (subgradient of the norm)
    ua = np.divide(A, na, out=np.zeros_like(A * np.ones_like(na)), where=na > 0)
    ub = np.divide(B, nb, out=np.zeros_like(B * np.ones_like(nb)), where=nb > 0)

    def back(g):
        g = g[..., None]
        ga = g * (B / (da * db) - out / da * ua)
        gb = g * (A / (da * db) - out / db * ub)
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return Tensor._make(out[..., 0], (a, b), back)


def one_hot_argmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """One-hot of argmax along ``axis``; ties resolve to the lowest index."""
    idx = np.argmax(x, axis=axis)
    out = np.zeros_like(x)
    np.put_along_axis(out, np.expand_dims(idx, axis), 1.0, axis=axis)
    return out
