"""Binary PGM/PPM export of predicted masks and episode frames."""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 graymap with maxval 255; nonzero pixels are written as 255."""
    m = np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8)
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + m.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap from a float RGB image in [0, 1]."""
    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    fields, pos = [], 0
    # header: magic, width, height, maxval separated by whitespace
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    return data[pos + 1 :], h, w


def read_pgm(path) -> np.ndarray:
    body, h, w = _read_netpbm(path, b"P5")
    return np.frombuffer(body, dtype=np.uint8, count=h * w).reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    body, h, w = _read_netpbm(path, b"P6")
    return np.frombuffer(body, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3).copy()


def raster(frames: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Frames on the top row and masks (grey) below, side by side over time."""
    frames = np.asarray(frames, dtype=np.float64)
    masks = np.asarray(masks) != 0
    top = np.concatenate(list(frames), axis=1)
    bottom = np.concatenate([np.repeat(m[..., None], 3, axis=-1).astype(np.float64) for m in masks], axis=1)
    return np.concatenate([top, bottom], axis=0)


def export_masks(out_dir, masks: np.ndarray, frames: np.ndarray = None) -> List[Path]:
    """Write ``frame_%03d.pgm`` per mask plus ``raster.ppm`` when frames are given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, m in enumerate(masks):
        p = out / f"frame_{t:03d}.pgm"
        write_pgm(p, m)
        paths.append(p)
    if frames is not None:
        write_ppm(out / "raster.ppm", raster(frames, masks))
    return paths
