"""Forward and backward warping of latent grids.

Grids are ``(C, H, W)`` arrays. Forward splatting scatters each source pixel
to the four integer neighbours of ``(y + dy, x + dx)`` with bilinear weights,
scaled by ``exp(M)`` of a per-source importance metric.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from latent_interp import _kernels
from latent_interp.flow import Flow

SPLAT_MAGIC = b"DMSPLT01"
HOLE_EPS = 1e-8


@dataclass(frozen=True)
class SplatMetric:
    values: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not np.isfinite(self.values).all():
            raise ValueError("metric contains non-finite values")


@dataclass(frozen=True)
class SplatResult:
    values: np.ndarray
    weight_sum: np.ndarray
    hole_mask: np.ndarray


def _check(grid: np.ndarray, flow: Flow) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected a (C, H, W) grid, got shape {grid.shape}")
    if grid.shape[1:] != flow.resolution:
        raise ValueError(f"flow resolution {flow.resolution} does not match grid {grid.shape[1:]}")
    return grid


def _sample(grid: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    _, h, w = grid.shape
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    g = grid.astype(np.float64, copy=False)
    top = g[:, y0, x0] * (1 - fx) + g[:, y0, x1] * fx
    bot = g[:, y1, x0] * (1 - fx) + g[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def backward_warp(grid, flow: Flow) -> np.ndarray:
    """Bilinear sample of ``grid`` at ``(x + dx, y + dy)``, clamped to the border."""
    grid = _check(grid, flow)
    h, w = flow.resolution
    ys, xs = np.mgrid[0:h, 0:w]
    out = _sample(grid, xs + flow.dx, ys + flow.dy)
    return out.astype(np.result_type(grid.dtype, np.float32))


def brightness_metric(z_src, z_dst, flow_src_to_dst: Flow, temperature: float = 10.0) -> SplatMetric:
    """Negative channel-mean L1 residual between ``z_src`` and ``z_dst`` pulled back along the flow."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z_src = _check(z_src, flow_src_to_dst)
    z_dst = _check(z_dst, flow_src_to_dst)
    if z_src.shape != z_dst.shape:
        raise ValueError(f"shape mismatch: {z_src.shape} vs {z_dst.shape}")
    residual = np.abs(z_src.astype(np.float64) - backward_warp(z_dst, flow_src_to_dst).astype(np.float64))
    return SplatMetric(-temperature * residual.mean(axis=0), float(temperature))


def _prepare(z, flow: Flow, metric: SplatMetric):
    z = _check(z, flow)
    m = np.asarray(metric.values, dtype=np.float64)
    if m.shape != flow.resolution:
        raise ValueError(f"metric shape {m.shape} does not match flow {flow.resolution}")
    return (
        z,
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(flow.dx),
        np.ascontiguousarray(flow.dy),
        np.exp(m),
    )


def softmax_splat(z, flow: Flow, metric: SplatMetric, hole_eps: float = HOLE_EPS) -> SplatResult:
    """Forward warp by exp(M)-weighted averaging of colliding contributions.

    Targets that receive less than ``hole_eps`` total weight are filled by
    backward-warping ``z`` along the reversed flow.
    """
    z, values, dx, dy, weight = _prepare(z, flow, metric)
    num, den = _kernels.splat_sum(values, dx, dy, weight)
    holes = den < hole_eps
    out = num / np.where(holes, 1.0, den)
    if holes.any():
        fill = backward_warp(values, -flow)
        out[:, holes] = fill[:, holes]
    return SplatResult(out.astype(np.result_type(z.dtype, np.float32)), den, holes)


def wta_splat(z, flow: Flow, metric: SplatMetric, hole_eps: float = HOLE_EPS) -> SplatResult:
    """Forward warp keeping only the largest-weight contribution per target.

    Ties go to the earliest source in row-major order. Holes take the
    nearest source pixel along the reversed flow, so every output value is a
    copy of some input value.
    """
    z, values, dx, dy, weight = _prepare(z, flow, metric)
    out, best = _kernels.splat_max(values, dx, dy, weight)
    holes = best < hole_eps
    if holes.any():
        h, w = flow.resolution
        ys, xs = np.mgrid[0:h, 0:w]
        sx = np.clip(np.rint(xs - dx), 0, w - 1).astype(np.int64)
        sy = np.clip(np.rint(ys - dy), 0, h - 1).astype(np.int64)
        out[:, holes] = values[:, sy[holes], sx[holes]]
    return SplatResult(out.astype(np.result_type(z.dtype, np.float32)), best, holes)


def save_splat(values: np.ndarray, path) -> None:
    """Debug dump: magic, then C, H, W as int32, then each channel row-major as float32."""
    values = np.asarray(values)
    c, h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(SPLAT_MAGIC)
        fh.write(struct.pack("<iii", c, h, w))
        fh.write(values.astype("<f4").tobytes())


def load_splat(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != SPLAT_MAGIC:
        raise ValueError(f"{path}: not a DMSPLT01 file")
    c, h, w = struct.unpack_from("<iii", data, 8)
    if len(data) != 20 + 4 * c * h * w:
        raise ValueError(f"{path}: truncated splat dump")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(c, h, w).copy()
