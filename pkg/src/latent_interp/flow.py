"""Dense correspondence from diffusion features, and flow-field utilities."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from latent_interp import _kernels

FLOW_MAGIC = b"DMFLOW01"

#: cosine similarities within this distance of the row maximum count as ties
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Flow:
    """Per-pixel displacement in pixels of its own ``(h, w)`` resolution.

    ``dx`` is the column offset and ``dy`` the row offset; pixel ``(y, x)``
    maps to ``(y + dy, x + dx)``.
    """

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError(f"dx/dy must be matching 2-D arrays, got {dx.shape} and {dy.shape}")
        if not (np.isfinite(dx).all() and np.isfinite(dy).all()):
            raise ValueError("flow contains non-finite displacements")
        h, w = dx.shape
        if (np.abs(dx) >= w).any() or (np.abs(dy) >= h).any():
            raise ValueError("flow displacement exceeds the grid extent")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, h: int, w: int) -> "Flow":
        return cls(np.zeros((h, w)), np.zeros((h, w)))

    def __neg__(self) -> "Flow":
        return Flow(-self.dx, -self.dy)


def _unit_rows(values: np.ndarray) -> np.ndarray:
    d = values.shape[0]
    rows = np.ascontiguousarray(values.reshape(d, -1).T, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if (norms == 0).any() or not np.isfinite(norms).all():
        raise ValueError("feature map has zero-norm or non-finite descriptors; cosine similarity undefined")
    return rows / norms[:, None]


def estimate_flow(f_src, f_dst) -> Flow:
    """Flow from ``f_src`` to ``f_dst`` by all-pairs cosine argmax.

    Accepts :class:`~latent_interp.backend.FeatureMap` objects or raw
    ``(D, h, w)`` arrays. Ties go to the smallest displacement, then to the
    earliest destination in row-major order, so a map matched against itself
    yields zero flow.
    """
    src = np.asarray(getattr(f_src, "values", f_src))
    dst = np.asarray(getattr(f_dst, "values", f_dst))
    if src.ndim != 3 or src.shape != dst.shape:
        raise ValueError(f"feature maps must share a (D, h, w) shape, got {src.shape} and {dst.shape}")
    _, h, w = src.shape
    idx = _kernels.cosine_argmax(_unit_rows(src), _unit_rows(dst), h, w, TIE_TOLERANCE)
    ty, tx = np.divmod(idx, w)
    ys, xs = np.mgrid[0:h, 0:w]
    return Flow((tx.reshape(h, w) - xs).astype(np.float64), (ty.reshape(h, w) - ys).astype(np.float64))


def scale_flow(flow: Flow, delta: float) -> Flow:
    """Displacements multiplied by ``delta`` (flow from time 0 to time delta)."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta={delta} outside [0, 1]")
    return Flow(flow.dx * delta, flow.dy * delta)


def _resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixel-centre bilinear resize with edge clamping."""
    sh, sw = a.shape
    ys = np.clip((np.arange(h) + 0.5) * (sh / h) - 0.5, 0, sh - 1)
    xs = np.clip((np.arange(w) + 0.5) * (sw / w) - 0.5, 0, sw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resample_flow(flow: Flow, target_resolution: tuple[int, int]) -> Flow:
    """Bilinearly resample to ``(h, w)``, rescaling magnitudes by the per-axis ratio."""
    h, w = (int(v) for v in target_resolution)
    if h < 1 or w < 1:
        raise ValueError(f"target resolution must be positive, got {(h, w)}")
    sh, sw = flow.resolution
    if (h, w) == (sh, sw):
        return flow
    dx = _resize_bilinear(flow.dx, h, w) * (w / sw)
    dy = _resize_bilinear(flow.dy, h, w) * (h / sh)
    return Flow(dx, dy)


def save_flow(flow: Flow, path) -> None:
    h, w = flow.resolution
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<ii", h, w))
        fh.write(flow.dx.astype("<f4").tobytes())
        fh.write(flow.dy.astype("<f4").tobytes())


def load_flow(path) -> Flow:
    data = Path(path).read_bytes()
    if data[:8] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a DMFLOW01 file")
    h, w = struct.unpack_from("<ii", data, 8)
    n = h * w
    if h < 1 or w < 1 or len(data) != 16 + 8 * n:
        raise ValueError(f"{path}: truncated or malformed flow file")
    arr = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    return Flow(arr[:n].reshape(h, w), arr[n:].reshape(h, w))


def extract_correspondence_features(
    z0_clean,
    z1_clean,
    backend,
    sched,
    feature_step: int = 14,
    feature_block: str = "up_block_2",
    cond=None,
):
    """Invert both clean latents to ``feature_step`` and return the chosen up-block outputs."""
    from latent_interp.sampling import ddim_invert

    if feature_block not in backend.block_ids():
        raise KeyError(f"backend has no block {feature_block!r}")
    f0 = ddim_invert(z0_clean, backend, sched, feature_step, cond, feature_step, feature_block).features
    f1 = ddim_invert(z1_clean, backend, sched, feature_step, cond, feature_step, feature_block).features
    return f0, f1
