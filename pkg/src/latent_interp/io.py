"""Image files and content hashes."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_PATTERN = "frame_{:04d}.png"


def load_image(path) -> np.ndarray:
    """RGB float32 in [0, 1], shape H x W x 3."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(image, path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def frame_hash(image) -> str:
    """SHA-256 over the 8-bit quantised pixels and their shape."""
    q = to_uint8(image)
    h = hashlib.sha256(str(q.shape).encode())
    h.update(q.tobytes())
    return h.hexdigest()


def write_frames(frames, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = out / FRAME_PATTERN.format(i)
        save_image(frame, path)
        paths.append(path)
    return paths


def read_frames(frames_dir) -> list[np.ndarray]:
    """Frames named ``frame_%04d.png``, in index order."""
    paths = sorted(Path(frames_dir).glob("frame_[0-9][0-9][0-9][0-9].png"))
    if not paths:
        raise FileNotFoundError(f"no frame_%04d.png files in {frames_dir}")
    return [load_image(p) for p in paths]
