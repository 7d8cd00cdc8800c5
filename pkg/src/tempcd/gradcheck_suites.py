"""Registry of finite-difference gradient suites, one per differentiable op or block.

Every suite builds small random 64-bit inputs, reduces the output to a scalar
with fixed random weights and compares backward() with central differences.
"""

from __future__ import annotations

import fnmatch
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, check_gradients
from .autodiff.gradcheck import GradCheckResult

SUITES: Dict[str, Callable[[], GradCheckResult]] = {}
TOLERANCE = 1e-4


def suite(name: str):
    def register(fn):
        SUITES[name] = fn
        return fn

    return register


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng(sum(name.encode()))


def _leaf(rng, *shape, low=None, high=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _away_from_zero(rng, *shape):
    data = rng.normal(size=shape)
    data = np.where(np.abs(data) < 0.1, 0.5, data)
    return Tensor(data, requires_grad=True)


def _run(name, forward, inputs, max_entries=None) -> GradCheckResult:
    """Check d/d inputs of sum(forward() * w) for a fixed random w."""
    out = forward()
    w = Tensor(_rng(name + "/w").normal(size=out.shape))
    return check_gradients(lambda: (forward() * w).sum(), inputs, tolerance=TOLERANCE, name=name, max_entries=max_entries)


# -- scalar and elementwise ops -----------------------------------------------

def _binary(op):
    def run():
        name = f"elementwise.{op}"
        rng = _rng(name)
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)
        return _run(name, lambda: ad.elementwise(op, a, b), [a, b])

    return run


for _op in ("add", "sub", "mul"):
    suite(f"elementwise.{_op}")(_binary(_op))


@suite("elementwise.div")
def _div():
    rng = _rng("div")
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, low=0.5, high=2.0)
    return _run("elementwise.div", lambda: a / b, [a, b])


def _unary(op, make):
    def run():
        name = f"elementwise.{op}"
        x = make(_rng(name))
        arg = 0.7 if op == "scale" else None
        return _run(name, lambda: ad.elementwise(op, x, arg), [x])

    return run


suite("elementwise.scale")(_unary("scale", lambda r: _leaf(r, 3, 4)))
suite("elementwise.relu")(_unary("relu", lambda r: _away_from_zero(r, 3, 4)))
suite("elementwise.sigmoid")(_unary("sigmoid", lambda r: _leaf(r, 3, 4)))
suite("elementwise.exp")(_unary("exp", lambda r: _leaf(r, 3, 4)))
suite("elementwise.log")(_unary("log", lambda r: _leaf(r, 3, 4, low=0.2, high=3.0)))


def _method(name, fn, make):
    def run():
        x = make(_rng(name))
        return _run(name, lambda: fn(x), [x])

    return run


suite("unary.sqrt")(_method("unary.sqrt", lambda x: x.sqrt(), lambda r: _leaf(r, 3, 4, low=0.3, high=2.0)))
suite("unary.abs")(_method("unary.abs", lambda x: x.abs(), lambda r: _away_from_zero(r, 3, 4)))
suite("unary.softplus")(_method("unary.softplus", lambda x: x.softplus(), lambda r: _leaf(r, 3, 4)))
suite("unary.pow")(_method("unary.pow", lambda x: x**3, lambda r: _leaf(r, 3, 4)))
suite("unary.neg")(_method("unary.neg", lambda x: -x, lambda r: _leaf(r, 3, 4)))


@suite("binary.maximum_minimum")
def _maxmin():
    rng = _rng("maxmin")
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    b.data[np.abs(a.data - b.data).min(axis=0) < 0.05] += 0.3
    return _run("binary.maximum_minimum", lambda: ad.maximum(a, b) + ad.minimum(a, b) * 2.0, [a, b])


@suite("matmul")
def _matmul():
    rng = _rng("matmul")
    a, b = _leaf(rng, 2, 1, 3, 4), _leaf(rng, 3, 4, 2)
    return _run("matmul", lambda: ad.matmul(a, b), [a, b])


# -- reductions and shape ops ---------------------------------------------------

@suite("reduce.sum_mean")
def _reduce():
    rng = _rng("reduce")
    x = _leaf(rng, 2, 3, 4)
    return _run("reduce.sum_mean", lambda: x.sum(axis=1) + x.mean(axis=(0, 1), keepdims=True).squeeze(0), [x])


@suite("shape.reshape_transpose")
def _shape():
    rng = _rng("shape")
    x = _leaf(rng, 2, 3, 4)
    return _run("shape.reshape_transpose", lambda: x.transpose(2, 0, 1).reshape(4, 6).swapaxes(0, 1).expand_dims(0), [x])


@suite("index.slice_gather")
def _index():
    rng = _rng("index")
    x = _leaf(rng, 5, 4)
    return _run("index.slice_gather", lambda: ad.gather(x, np.array([0, 3, 3, 1]), axis=0) * x[1:, ::2].sum(), [x])


@suite("index.concat_stack")
def _concat():
    rng = _rng("concat")
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return _run("index.concat_stack", lambda: ad.stack([ad.concat([a, b], axis=1), ad.concat([b, a], axis=1)]), [a, b])


@suite("index.where")
def _where():
    rng = _rng("where")
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    cond = rng.random((3, 4)) > 0.5
    return _run("index.where", lambda: ad.where(cond, a, b * b), [a, b])


# -- fused ops ------------------------------------------------------------------

@suite("softmax")
def _softmax():
    rng = _rng("softmax")
    x = _leaf(rng, 2, 3, 5)
    return _run("softmax", lambda: ad.softmax(x, axis=-1) + ad.softmax(x, axis=1), [x])


@suite("layer_norm")
def _layer_norm():
    rng = _rng("layer_norm")
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    return _run("layer_norm", lambda: ad.layer_norm(x, g, b), [x, g, b])


@suite("cosine_similarity")
def _cosine():
    rng = _rng("cosine")
    a, b = _leaf(rng, 2, 3, 5), _leaf(rng, 1, 5)
    return _run("cosine_similarity", lambda: ad.cosine_similarity(a, b), [a, b])


@suite("straight_through")
def _straight_through():
    # the backward of the straight-through op is the relaxed softmax backward
    rng = _rng("st")
    s = _leaf(rng, 3, 4)
    soft = lambda: ad.softmax(s.scale(2.0), axis=-1)  # noqa: E731
    w = rng.normal(size=(3, 4))
    s.zero_grad()
    (ad.straight_through(ad.one_hot_argmax(soft().data), soft()) * w).sum().backward()
    st_grad = s.grad.copy()
    res = check_gradients(lambda: (soft() * w).sum(), [s], tolerance=TOLERANCE, name="straight_through")
    s.zero_grad()
    (soft() * w).sum().backward()
    err = float(np.abs(st_grad - s.grad).max())
    return GradCheckResult("straight_through", max(res.max_rel_error, err), res.n_checked, TOLERANCE)


# -- model blocks ---------------------------------------------------------------

def _module_inputs(*modules):
    return [p for m in modules for p in m.parameters()]


@suite("block.attention")
def _attention():
    from .nn import MultiHeadSelfAttention

    rng = _rng("attention")
    block = MultiHeadSelfAttention(8, 2, rng)
    x, pos = _leaf(rng, 2, 4, 8), Tensor(rng.normal(size=(4, 8)))
    return _run("block.attention", lambda: block(x, pos), [x] + _module_inputs(block), max_entries=6)


@suite("block.detr_layer")
def _detr():
    from .nn import DetrDecoderLayer

    rng = _rng("detr")
    layer = DetrDecoderLayer(8, 2, 8, rng)
    q, v = _leaf(rng, 3, 2, 8), _leaf(rng, 3, 4, 8)
    return _run("block.detr_layer", lambda: layer(q, v), [q, v] + _module_inputs(layer), max_entries=6)


@suite("block.frame_encoder")
def _frame_encoder():
    from .fusion import FrameEncoder

    rng = _rng("frames")
    enc = FrameEncoder(8, 4, 4, rng)
    frames = rng.random((2, 4, 4, 3))
    fs = _leaf(rng, 8)

    def forward():
        fused, pixels = enc.encode(frames, fs)
        return ad.concat([fused, pixels], axis=-2)

    return _run("block.frame_encoder", forward, [fs] + _module_inputs(enc), max_entries=6)


@suite("block.upsample")
def _upsample():
    from .heads import upsample_bilinear

    x = _leaf(_rng("upsample"), 2, 3, 3)
    return _run("block.upsample", lambda: upsample_bilinear(x, (5, 6)), [x])


@suite("loss.terms")
def _losses():
    from .losses import dice_loss, focal_loss, giou_loss, l1_loss

    rng = _rng("losses")
    logits = _leaf(rng, 2, 3, 4, 4)
    gt = (rng.random((2, 3, 4, 4)) > 0.5).astype(float)
    raw = _leaf(rng, 2, 3, 4)
    gt_box = np.concatenate([rng.uniform(0.3, 0.7, (2, 3, 2)), rng.uniform(0.1, 0.4, (2, 3, 2))], axis=-1)

    def forward():
        box = raw.sigmoid()
        return dice_loss(logits.sigmoid(), gt) + focal_loss(logits, gt) + giou_loss(box, gt_box) + l1_loss(box, gt_box)

    return check_gradients(lambda: forward(), [logits, raw], tolerance=TOLERANCE, name="loss.terms")


def full_stack(L: int = 2, T: int = 3, N: int = 2, C: int = 8, P: int = 4, seed: int = 0):
    """(forward, inputs) for the whole decoder stack with heads and losses, in relaxed mode."""
    from .decoder import TempCDLayer, init_state, run_layer
    from .heads import BoxHead, PredictionSet, ReferentHead, SegmentationHead, final_referent
    from .losses import LossWeights, total_loss

    rng = np.random.default_rng(seed)
    side = int(round(np.sqrt(P)))
    if side * side != P:
        raise ValueError("P must be a square number")
    layers = [TempCDLayer(C, 2, C, C, T, rng, gate="channel") for _ in range(L)]
    head, seg, box = ReferentHead(C, C, rng), SegmentationHead(C, rng), BoxHead(C, C, rng)
    feats, fs = _leaf(rng, T, P, C), _leaf(rng, C)
    slots = _leaf(rng, N, C)
    # the mask head reads pixel features at twice the grid resolution
    pixels, size = _leaf(rng, T, 4 * P, C), (2 * side, 2 * side)
    gt_masks = (rng.random((1, T) + size) > 0.5).astype(float)
    gt_boxes = np.tile([[0.5, 0.45, 0.3, 0.4]], (1, T, 1))
    objects = np.stack([gt_boxes[0], np.tile([[0.2, 0.7, 0.2, 0.25]], (T, 1))])[None]
    weights = LossWeights(slots=1.0, referent=1.0)

    def forward():
        state = init_state(fs, T, N, slots)
        preds = []
        for layer in layers:
            state, _, dist = run_layer(state, feats, fs, layer, 1.0, None, "relaxed")
            ref, idx, scores = final_referent(dist, fs, head, state.queries, 1.0, "relaxed", return_scores=True)
            logits = seg(ref, feats, (side, side), pixels, size).expand_dims(0)
            pred = PredictionSet(ref, logits, box(ref).expand_dims(0), idx)
            pred.slot_boxes = box(state.queries).expand_dims(0)
            pred.slot_scores = [scores.expand_dims(0)]
            preds.append(pred)
        return total_loss(preds, gt_masks, gt_boxes, weights, objects, [0]).total

    return forward, [feats, fs, slots, pixels] + _module_inputs(*layers, head, seg, box)


@suite("stack.full")
def _stack():
    forward, inputs = full_stack()
    return check_gradients(forward, inputs, tolerance=TOLERANCE, name="stack.full", max_entries=4)


# -- runner ---------------------------------------------------------------------

@dataclass
class SuiteReport:
    results: List[GradCheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    def table(self) -> str:
        width = max(len(r.name) for r in self.results) if self.results else 4
        lines = [f"{'suite':<{width}}  {'max_rel_err':>11}  {'n':>5}  status"]
        for r in self.results:
            lines.append(f"{r.name:<{width}}  {r.max_rel_error:11.3e}  {r.n_checked:5d}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"{sum(r.passed for r in self.results)}/{len(self.results)} suites passed in {self.seconds:.1f}s")
        return "\n".join(lines)


def select_suites(patterns: Optional[Iterable[str]] = None) -> List[str]:
    """Suite names matching any glob or prefix in ``patterns`` (all when empty)."""
    patterns = [p for p in (patterns or []) if p]
    if not patterns:
        return list(SUITES)
    return [n for n in SUITES if any(fnmatch.fnmatch(n, p) or n.startswith(p) for p in patterns)]


def run_suites(patterns: Optional[Iterable[str]] = None) -> SuiteReport:
    if ad.get_dtype() != np.float64:
        raise RuntimeError("gradient suites need 64-bit precision (TEMPCD_PRECISION=64)")
    start = time.perf_counter()
    results = [SUITES[name]() for name in select_suites(patterns)]
    return SuiteReport(results, time.perf_counter() - start)
