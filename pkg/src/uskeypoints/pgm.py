"""Binary (P5) PGM frames and frame-directory helpers."""

from __future__ import annotations

import os
import re
from pathlib import Path
from typing import List

import numpy as np

FRAME_RE = re.compile(r"frame_(\d{6})\.pgm$")


def _tokens(buf: bytes, start: int, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, i = [], start
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        out.append(int(buf[i:j]))
        i = j
    return out, i + 1


def read_pgm(path) -> np.ndarray:
    """Return the image as floats in [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    (w, h, maxval), pos = _tokens(buf, 2, 3)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    """Write floats in [0, 1] as 8-bit P5."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + q.tobytes())


def frame_name(index: int) -> str:
    return f"frame_{index:06d}.pgm"


def list_frames(directory) -> List[Path]:
    files = [p for p in Path(directory).iterdir() if FRAME_RE.search(p.name)]
    return sorted(files, key=lambda p: int(FRAME_RE.search(p.name).group(1)))


def read_video(directory) -> np.ndarray:
    frames = list_frames(directory)
    if not frames:
        raise FileNotFoundError(f"no frame_NNNNNN.pgm files in {directory}")
    return np.stack([read_pgm(p) for p in frames])


def write_video(directory, frames) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, f in enumerate(frames):
        write_pgm(Path(directory) / frame_name(i), f)
