"""Binary checkpoints: config snapshot, parameters, optimizer moments, RNG state, step.

Layout (little-endian)::

    b"TCDC" | u32 version | u32 len + config text
    u32 n_params, then per parameter: u16 len + name | u8 rank | u32 dims... | f8 values
    u64 optimizer t, then first and second moments in parameter order (f8)
    u32 len + RNG state as canonical JSON | u64 step

Values are always stored as float64 so a 32-bit run round-trips exactly too.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import get_dtype
from .config import Config, from_text

MAGIC = b"TCDC"
VERSION = 1
ARCH_KEYS = ("model.C", "model.L", "model.N", "model.heads", "model.H_mlp", "model.ffn_hidden", "data.T", "data.H", "data.W")


class CheckpointError(ValueError):
    pass


def _array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def to_bytes(state) -> bytes:
    """Serialize a ``TrainState``."""
    model, opt = state.model, state.optimizer
    named = list(model.named_parameters())
    text = model.cfg.to_text().encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(named))]
    for name, p in named:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(_array(p.data))
    parts.append(struct.pack("<Q", opt.t))
    parts.extend(_array(m) for m in opt.m)
    parts.extend(_array(v) for v in opt.v)
    rng_json = json.dumps(state.rng.bit_generator.state, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(rng_json)) + rng_json)
    parts.append(struct.pack("<Q", state.step))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.raw(struct.calcsize(fmt)))

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.raw(8 * n), dtype="<f8").reshape(shape).copy()


def _check_arch(saved: Config, expected: Config) -> None:
    a, b = saved.flat(), expected.flat()
    diff = [f"{k}: checkpoint {a[k]} vs requested {b[k]}" for k in ARCH_KEYS if a[k] != b[k]]
    if diff:
        raise CheckpointError("checkpoint does not match the configuration: " + "; ".join(diff))


def from_bytes(buf: bytes, expected: Optional[Config] = None):
    """Rebuild a ``TrainState``; ``expected`` must agree on every architecture field.

    When ``expected`` is given it becomes the state's config, so a resumed run
    picks up new step counts, learning rates and so on.
    """
    from .train import init_training

    r = _Reader(buf)
    if r.raw(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n_text = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = from_text(r.raw(n_text).decode())
    if expected is not None:
        _check_arch(cfg, expected)
    state = init_training(expected if expected is not None else cfg)
    named = dict(state.model.named_parameters())
    (n_params,) = r.unpack("<I")
    if n_params != len(named):
        raise CheckpointError(f"checkpoint holds {n_params} parameters, model has {len(named)}")
    dtype = get_dtype()
    for _ in range(n_params):
        (n_name,) = r.unpack("<H")
        name = r.raw(n_name).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        if name not in named:
            raise CheckpointError(f"unknown parameter {name!r}")
        p = named[name]
        if tuple(shape) != p.data.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {tuple(shape)} vs model {p.data.shape}")
        p.data = r.array(shape).astype(dtype)
    opt = state.optimizer
    (opt.t,) = r.unpack("<Q")
    opt.m = [r.array(p.data.shape).astype(dtype) for p in opt.params]
    opt.v = [r.array(p.data.shape).astype(dtype) for p in opt.params]
    (n_rng,) = r.unpack("<I")
    state.rng.bit_generator.state = json.loads(r.raw(n_rng).decode())
    (state.step,) = r.unpack("<Q")
    if r.off != len(buf):
        raise CheckpointError(f"{len(buf) - r.off} trailing bytes after checkpoint")
    return state


def save_checkpoint(state, path) -> None:
    Path(path).write_bytes(to_bytes(state))


def load_checkpoint(path, expected: Optional[Config] = None):
    return from_bytes(Path(path).read_bytes(), expected)
