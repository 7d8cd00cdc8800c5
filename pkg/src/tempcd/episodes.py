"""Synthetic moving-shapes episodes for referring video segmentation.

Each episode is a short video of coloured shapes moving at constant velocity
plus an expression (shape, colour, motion) that designates exactly one object.
In ``motion-discriminative`` episodes a distractor shares the referent's shape
and colour, so the expression can only be resolved from how objects move.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

SHAPES = ("square", "disc", "bar")
COLORS = ("r", "g", "b")
MOTIONS = ("left", "right", "up", "down", "static")
DIFFICULTIES = ("appearance", "motion-discriminative")
EXPRESSION_DIM = len(SHAPES) + len(COLORS) + len(MOTIONS)

VELOCITY = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "static": (0, 0)}

MAGIC = b"TCDE"
VERSION = 1
MAX_ATTEMPTS = 100


class EpisodeError(RuntimeError):
    pass


def _disc(d: int = 5) -> np.ndarray:
    r = (d - 1) / 2
    yy, xx = np.mgrid[:d, :d]
    return ((yy - r) ** 2 + (xx - r) ** 2) <= (r + 0.5) ** 2 - 0.5


SPRITES = {
    "square": np.ones((4, 4), dtype=bool),
    "disc": _disc(5),
    "bar": np.ones((2, 6), dtype=bool),
}


@dataclass(frozen=True)
class ExpressionSpec:
    shape: str
    color: str
    motion: str

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.motion not in MOTIONS:
            raise ValueError(f"invalid expression {self}")

    @property
    def indices(self) -> Tuple[int, int, int]:
        return SHAPES.index(self.shape), COLORS.index(self.color), MOTIONS.index(self.motion)

    def one_hot(self) -> np.ndarray:
        """Concatenated one-hots (3 + 3 + 5 = 11 dims)."""
        s, c, m = self.indices
        out = np.zeros(EXPRESSION_DIM)
        out[s] = 1.0
        out[len(SHAPES) + c] = 1.0
        out[len(SHAPES) + len(COLORS) + m] = 1.0
        return out


@dataclass
class ObjectTrack:
    shape: str
    color: str
    motion: str
    positions: np.ndarray  # [T, 2] top-left (x, y)

    def matches(self, spec: ExpressionSpec) -> bool:
        return (self.shape, self.color, self.motion) == (spec.shape, spec.color, spec.motion)

    def mask(self, t: int, h: int, w: int) -> np.ndarray:
        sprite = SPRITES[self.shape]
        out = np.zeros((h, w), dtype=bool)
        x, y = self.positions[t]
        sh, sw = sprite.shape
        out[y : y + sh, x : x + sw] = sprite
        return out


@dataclass
class Episode:
    frames: np.ndarray  # [T, H, W, 3] float64
    gt_masks: np.ndarray  # [T, H, W] uint8
    gt_boxes: np.ndarray  # [T, 4] (cx, cy, w, h) normalised
    expression: ExpressionSpec
    seed: int
    difficulty: str
    referent: int
    objects: List[ObjectTrack] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def object_boxes(ep: "Episode") -> np.ndarray:
    """Tight boxes of every object in every frame, [K, T, 4]."""
    h, w = ep.gt_masks.shape[1:]
    return np.array([[mask_to_box(o.mask(t, h, w)) for t in range(ep.T)] for o in ep.objects])


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight (cx, cy, w, h) box of a nonempty mask, normalised by the image size."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask has no bounding box")
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return np.array([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h])


def _trajectory(rng, shape: str, motion: str, T: int, h: int, w: int) -> np.ndarray:
    sh, sw = SPRITES[shape].shape
    dx, dy = VELOCITY[motion]
    span_x, span_y = abs(dx) * (T - 1), abs(dy) * (T - 1)
    room_x, room_y = w - sw - span_x, h - sh - span_y
    if room_x < 0 or room_y < 0:
        raise EpisodeError(f"a {shape} moving {motion} does not fit in {h}x{w} over {T} frames")
    x0 = int(rng.integers(0, room_x + 1)) + (span_x if dx < 0 else 0)
    y0 = int(rng.integers(0, room_y + 1)) + (span_y if dy < 0 else 0)
    steps = np.arange(T)[:, None] * np.array([dx, dy])[None, :]
    pos = np.array([x0, y0]) + steps
    # clamp so sprites stay inside the frame
    pos[:, 0] = np.clip(pos[:, 0], 0, w - sw)
    pos[:, 1] = np.clip(pos[:, 1], 0, h - sh)
    return pos


def _separated(a: ObjectTrack, b: ObjectTrack, T: int, gap: int = 1) -> bool:
    sa, sb = SPRITES[a.shape].shape, SPRITES[b.shape].shape
    for t in range(T):
        ax, ay = a.positions[t]
        bx, by = b.positions[t]
        if ax < bx + sb[1] + gap and bx < ax + sa[1] + gap and ay < by + sb[0] + gap and by < ay + sa[0] + gap:
            return False
    return True


def _place(rng, attrs, T, H, W, tries: int = 20):
    tracks: List[ObjectTrack] = []
    for s, c, m in attrs:
        for _ in range(tries):
            cand = ObjectTrack(s, c, m, _trajectory(rng, s, m, T, H, W))
            if all(_separated(cand, other, T) for other in tracks):
                tracks.append(cand)
                break
        else:
            return None
    return tracks


def _attributes(rng, difficulty: str, n_objects: int):
    def choice(options):
        return options[int(rng.integers(len(options)))]

    ref = (choice(SHAPES), choice(COLORS), choice(MOTIONS))
    others = []
    appearance_pool = [(s, c) for s in SHAPES for c in COLORS if (s, c) != ref[:2]]
    start = 0
    if difficulty == "motion-discriminative":
        others.append((ref[0], ref[1], choice([m for m in MOTIONS if m != ref[2]])))
        start = 1
    for _ in range(start, n_objects - 1):
        s, c = appearance_pool[int(rng.integers(len(appearance_pool)))]
        others.append((s, c, choice(MOTIONS)))
    return ref, others


def generate_episode(
    seed: int,
    difficulty: str = "appearance",
    T: int = 6,
    H: int = 16,
    W: int = 16,
    n_objects: int = 3,
) -> Episode:
    """Deterministic episode for ``seed``; raises EpisodeError if placement keeps failing."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    if n_objects < 2:
        raise ValueError("episodes need at least two objects")
    rng = np.random.default_rng(seed)
    ref_attr, other_attr = _attributes(rng, difficulty, n_objects)
    order = rng.permutation(n_objects)
    attrs = [None] * n_objects
    attrs[order[0]] = ref_attr
    for k, a in zip(order[1:], other_attr):
        attrs[k] = a
    referent = int(order[0])

    # each attempt places the objects one by one so only the latest needs re-drawing
    for _ in range(MAX_ATTEMPTS):
        tracks = _place(rng, attrs, T, H, W)
        if tracks is not None:
            break
    else:
        raise EpisodeError(f"could not place {n_objects} objects after {MAX_ATTEMPTS} attempts (seed {seed})")

    frames = np.zeros((T, H, W, 3))
    for tr in tracks:
        ch = COLORS.index(tr.color)
        for t in range(T):
            frames[t, tr.mask(t, H, W), ch] = 1.0
    ref = tracks[referent]
    masks = np.stack([ref.mask(t, H, W) for t in range(T)]).astype(np.uint8)
    boxes = np.stack([mask_to_box(m) for m in masks])
    spec = ExpressionSpec(*ref_attr)
    return Episode(frames, masks, boxes, spec, int(seed), difficulty, referent, tracks)


def matching_objects(ep: Episode) -> List[int]:
    return [i for i, tr in enumerate(ep.objects) if tr.matches(ep.expression)]


def episode_difficulty(index: int, motion_fraction: float) -> str:
    """Deterministic difficulty for the ``index``-th episode of a stream."""
    # low-discrepancy sequence: every prefix has close to the requested mix
    frac = (index * 0.6180339887498949) % 1.0
    return "motion-discriminative" if frac < motion_fraction else "appearance"


def generate_dataset(seed: int, count: int, motion_fraction: float = 0.5, **kwargs) -> List[Episode]:
    return [
        generate_episode(seed + i, episode_difficulty(i, motion_fraction), **kwargs) for i in range(count)
    ]


# -- serialization -----------------------------------------------------------

def to_bytes(ep: Episode) -> bytes:
    T, H, W, _ = ep.frames.shape
    parts = [MAGIC, struct.pack("<5I", VERSION, T, H, W, len(ep.objects))]
    parts.append(np.ascontiguousarray(ep.frames, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(ep.gt_masks, dtype="u1").tobytes())
    parts.append(np.ascontiguousarray(ep.gt_boxes, dtype="<f8").tobytes())
    parts.append(struct.pack("<3I", *ep.expression.indices))
    parts.append(struct.pack("<QII", ep.seed, DIFFICULTIES.index(ep.difficulty), ep.referent))
    for tr in ep.objects:
        parts.append(struct.pack("<3I", SHAPES.index(tr.shape), COLORS.index(tr.color), MOTIONS.index(tr.motion)))
        parts.append(np.ascontiguousarray(tr.positions, dtype="<i4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Episode:
    if buf[:4] != MAGIC:
        raise ValueError("not an episode file (bad magic)")
    version, T, H, W, n = struct.unpack_from("<5I", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported episode version {version}")
    off = 24

    def take(dtype, shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.copy()

    frames = take("<f8", (T, H, W, 3)).astype(np.float64)
    masks = take("u1", (T, H, W))
    boxes = take("<f8", (T, 4)).astype(np.float64)
    s, c, m = struct.unpack_from("<3I", buf, off)
    off += 12
    seed, diff, referent = struct.unpack_from("<QII", buf, off)
    off += 16
    objects = []
    for _ in range(n):
        a, b, d = struct.unpack_from("<3I", buf, off)
        off += 12
        pos = take("<i4", (T, 2)).astype(np.int64)
        objects.append(ObjectTrack(SHAPES[a], COLORS[b], MOTIONS[d], pos))
    spec = ExpressionSpec(SHAPES[s], COLORS[c], MOTIONS[m])
    return Episode(frames, masks, boxes, spec, seed, DIFFICULTIES[diff], referent, objects)


def save_episode(ep: Episode, path) -> None:
    Path(path).write_bytes(to_bytes(ep))


def load_episode(path) -> Episode:
    return from_bytes(Path(path).read_bytes())
