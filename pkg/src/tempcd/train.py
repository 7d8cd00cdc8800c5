"""Training loop, AdamW optimizer and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import Config
from .episodes import Episode, generate_dataset, object_boxes
from .losses import LossWeights, total_loss
from .metrics import MetricsReport, aggregate, inter_union, sequence_metrics
from .model import TempCDModel, batch_inputs, downsample_masks

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 1_000_000


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, seeds: List[int], terms: Dict[str, float]):
        super().__init__(f"non-finite loss at step {step} (episode seeds {seeds}): {terms}")
        self.step, self.seeds, self.terms = step, seeds, terms


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def make_datasets(cfg: Config):
    d = cfg.data
    kw = dict(T=d.T, H=d.H, W=d.W, n_objects=d.n_objects)
    train = generate_dataset(d.seed, d.n_train, d.motion_fraction, **kw)
    val = generate_dataset(d.seed + VAL_SEED_OFFSET, d.n_val, d.motion_fraction, **kw)
    return train, val


def batch_targets(episodes: Sequence[Episode], resolution: str):
    masks = np.stack([ep.gt_masks for ep in episodes]).astype(np.float64)
    if resolution == "feature":
        masks = downsample_masks(masks)
    boxes = np.stack([ep.gt_boxes for ep in episodes])
    return masks, boxes


def compute_loss(model: TempCDModel, episodes: Sequence[Episode], rng: Optional[np.random.Generator], mode: str = "st"):
    cfg = model.cfg
    frames, expr = batch_inputs(episodes)
    out = model(frames, expr, rng=rng, mode=mode)
    preds = out.predictions
    full = preds[0].mask_logits.shape[-2:] == (cfg.data.H, cfg.data.W)
    masks, boxes = batch_targets(episodes, "full" if full else cfg.loss.mask_resolution)
    if not full and cfg.loss.mask_resolution == "full":
        preds = [_Full(model.mask_logits_full(p), p.boxes) for p in preds]
    w = LossWeights(cfg.loss.dice, cfg.loss.focal, cfg.loss.giou, cfg.loss.l1, cfg.loss.slots, cfg.loss.referent)
    objects = np.stack([object_boxes(ep) for ep in episodes]) if cfg.loss.slots > 0 else None
    referents = [ep.referent for ep in episodes]
    return total_loss(preds, masks, boxes, w, objects, referents, cfg.model.tau), out


@dataclass
class _Full:
    mask_logits: object
    boxes: object


@dataclass
class TrainState:
    model: TempCDModel
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    val_history: List[Dict[str, float]] = field(default_factory=list)


def learning_rate(optim, step: int) -> float:
    """Step size for the update after ``step`` completed steps.

    ``cosine`` anneals from lr to lr / 10 over ``optim.steps``.
    """
    if optim.schedule == "constant" or optim.steps <= 0:
        return optim.lr
    frac = min(step / optim.steps, 1.0)
    return optim.lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * frac)))


def init_training(cfg: Config) -> TrainState:
    model = TempCDModel(cfg)
    o = cfg.optim
    opt = AdamW(model.parameters(), lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
    return TrainState(model, opt, np.random.default_rng(o.seed))


def train(
    cfg: Config,
    state: Optional[TrainState] = None,
    datasets=None,
    callback: Optional[Callable[[TrainState, Dict[str, float]], None]] = None,
    time_budget: Optional[float] = None,
) -> TrainState:
    """Run ``cfg.optim.steps`` optimizer steps (continuing from ``state`` if given)."""
    state = state or init_training(cfg)
    train_eps, val_eps = datasets or make_datasets(cfg)
    model, opt, rng = state.model, state.optimizer, state.rng
    params = opt.params
    start = time.perf_counter()
    while state.step < cfg.optim.steps:
        idx = rng.choice(len(train_eps), size=min(cfg.optim.batch, len(train_eps)), replace=False)
        batch = [train_eps[i] for i in idx]
        opt.zero_grad()
        breakdown, _ = compute_loss(model, batch, rng)
        terms = breakdown.as_dict()
        if not all(np.isfinite(v) for v in terms.values()):
            raise NonFiniteLoss(state.step, [ep.seed for ep in batch], terms)
        breakdown.total.backward()
        terms["grad_norm"] = clip_grad_norm(params, cfg.optim.grad_clip)
        opt.lr = learning_rate(cfg.optim, state.step)
        opt.step()
        state.step += 1
        terms["step"] = state.step
        state.history.append(terms)
        if cfg.train.log_every and state.step % cfg.train.log_every == 0:
            log.info("step %d total %.4f dice %.4f focal %.4f giou %.4f l1 %.4f",
                     state.step, terms["total"], terms["dice"], terms["focal"], terms["giou"], terms["l1"])
        if cfg.train.val_every and state.step % cfg.train.val_every == 0 and val_eps:
            report = evaluate(model, val_eps)
            state.val_history.append({"step": state.step, "jf": report.jf, "j": report.j, "f": report.f})
            log.info("step %d val J&F %.4f", state.step, report.jf)
        if callback is not None:
            callback(state, terms)
        if time_budget is not None and time.perf_counter() - start > time_budget:
            log.warning("time budget of %.0fs reached at step %d", time_budget, state.step)
            break
    return state


def evaluate(model: TempCDModel, episodes: Sequence[Episode], batch: int = 10, masks=None) -> MetricsReport:
    """Aggregate sequence metrics; pass ``masks`` to score given predictions instead of the model."""
    cfg = model.cfg if model is not None else None
    tol = cfg.eval.tolerance if cfg else 1
    if masks is None:
        masks = predict(model, episodes, batch)
    reports, pairs = [], []
    for ep, pred in zip(episodes, masks):
        reports.append(sequence_metrics(list(pred), list(ep.gt_masks), tol))
        pairs.append(inter_union(pred, ep.gt_masks))
    return aggregate(reports, pairs)


def predict(model: TempCDModel, episodes: Sequence[Episode], batch: int = 10) -> np.ndarray:
    chunks = [model.predict_masks(episodes[i : i + batch]) for i in range(0, len(episodes), batch)]
    return np.concatenate(chunks, axis=0)


def evaluate_by_difficulty(model: TempCDModel, episodes: Sequence[Episode]) -> Dict[str, MetricsReport]:
    masks = predict(model, episodes)
    out = {"all": evaluate(model, episodes, masks=masks)}
    for diff in ("appearance", "motion-discriminative"):
        sel = [i for i, ep in enumerate(episodes) if ep.difficulty == diff]
        if sel:
            out[diff] = evaluate(model, [episodes[i] for i in sel], masks=masks[sel])
    return out
