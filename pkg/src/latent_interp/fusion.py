"""Fusion of two inverted latents into one intermediate noisy latent.

``direct_fuse`` splats and time-blends the noisy latents themselves.
``two_level_fuse`` splits each latent into its clean-latent prediction and
its noise prediction, blends the former by softmax splatting, picks the
latter winner-takes-all, and recomposes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from latent_interp.flow import Flow, scale_flow
from latent_interp.scheduler import NoiseSchedule, predict_clean, recompose
from latent_interp.warp import SplatMetric, brightness_metric, softmax_splat, wta_splat


@dataclass(frozen=True)
class FusionInputs:
    z0_T: np.ndarray
    z1_T: np.ndarray
    eps0: np.ndarray
    eps1: np.ndarray
    F01: Flow
    F10: Flow
    sched: NoiseSchedule
    fusion_step: int
    temperature: float = 10.0

    def __post_init__(self):
        shape = np.shape(self.z0_T)
        for name in ("z1_T", "eps0", "eps1"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        for name in ("F01", "F10"):
            if getattr(self, name).resolution != tuple(shape[1:]):
                raise ValueError(f"{name} resolution {getattr(self, name).resolution} != latent {shape[1:]}")

    @property
    def timestep(self) -> int:
        return self.sched.timestep_at(self.fusion_step)

    # one brightness metric per direction, shared by both fusion levels
    @cached_property
    def metric0(self) -> SplatMetric:
        return brightness_metric(self.z0_T, self.z1_T, self.F01, self.temperature)

    @cached_property
    def metric1(self) -> SplatMetric:
        return brightness_metric(self.z1_T, self.z0_T, self.F10, self.temperature)

    @cached_property
    def clean0(self) -> np.ndarray:
        return predict_clean(_f64(self.z0_T), _f64(self.eps0), self.timestep, self.sched)

    @cached_property
    def clean1(self) -> np.ndarray:
        return predict_clean(_f64(self.z1_T), _f64(self.eps1), self.timestep, self.sched)


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _out_dtype(inp: FusionInputs):
    return np.result_type(np.asarray(inp.z0_T).dtype, np.float32)


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta={delta} outside [0, 1]")
    return delta


def _blend(inp: FusionInputs, a0: np.ndarray, a1: np.ndarray, delta: float) -> np.ndarray:
    w0 = softmax_splat(a0, scale_flow(inp.F01, delta), inp.metric0).values.astype(np.float64)
    w1 = softmax_splat(a1, scale_flow(inp.F10, 1.0 - delta), inp.metric1).values.astype(np.float64)
    return ((1.0 - delta) * w0 + delta * w1).astype(np.result_type(a0.dtype, np.float32))


def direct_fuse(inp: FusionInputs, delta: float) -> np.ndarray:
    """Time-weighted blend of both noisy latents splatted to ``delta``."""
    delta = _check_delta(delta)
    return _blend(inp, inp.z0_T, inp.z1_T, delta).astype(_out_dtype(inp))


def fuse_high_level(inp: FusionInputs, delta: float) -> np.ndarray:
    """Time-weighted blend of the splatted clean-latent predictions."""
    delta = _check_delta(delta)
    return _blend(inp, inp.clean0, inp.clean1, delta).astype(_out_dtype(inp))


def fuse_low_level_wta(inp: FusionInputs, delta: float) -> np.ndarray:
    """Per-pixel winner-takes-all between the two WTA-splatted noise predictions.

    Splat weights are scaled by the time factors ``1 - delta`` and ``delta``;
    on equal weights the source nearer in time wins, source 0 at ``delta = 0.5``.
    """
    delta = _check_delta(delta)
    s0 = wta_splat(inp.eps0, scale_flow(inp.F01, delta), inp.metric0)
    s1 = wta_splat(inp.eps1, scale_flow(inp.F10, 1.0 - delta), inp.metric1)
    w0 = (1.0 - delta) * s0.weight_sum
    w1 = delta * s1.weight_sum
    take1 = (w1 > w0) | ((w1 == w0) & (delta > 0.5))
    return np.where(take1[None], s1.values, s0.values)


def two_level_fuse(inp: FusionInputs, delta: float) -> np.ndarray:
    """Recompose the fused clean prediction with the WTA-fused noise at the fusion step."""
    delta = _check_delta(delta)
    high = _blend(inp, inp.clean0, inp.clean1, delta)
    low = fuse_low_level_wta(inp, delta)
    return recompose(high, _f64(low), inp.timestep, inp.sched).astype(_out_dtype(inp))


def fuse(inp: FusionInputs, delta: float, mode: str = "two_level") -> np.ndarray:
    if mode == "two_level":
        return two_level_fuse(inp, delta)
    if mode == "direct":
        return direct_fuse(inp, delta)
    raise ValueError(f"unknown fusion mode {mode!r}")
