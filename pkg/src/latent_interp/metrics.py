"""Warping error, middle-frame warping error and Fourier high-frequency energy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from latent_interp.flow import Flow
from latent_interp.warp import backward_warp

LUMA = np.array([0.299, 0.587, 0.114])

FlowFn = Callable[[np.ndarray, np.ndarray], Flow]


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[np.ndarray, ...]

    def __post_init__(self):
        frames = tuple(np.asarray(f, dtype=np.float64) for f in self.frames)
        if len(frames) < 2:
            raise ValueError("a frame sequence needs at least two frames")
        if len({f.shape for f in frames}) != 1:
            raise ValueError("frames must share one size")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    @property
    def middle(self) -> np.ndarray:
        return self.frames[len(self.frames) // 2]


def _luma(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise ValueError(f"expected H x W x 3 or H x W image, got {img.shape}")


def high_frequency_mask(h: int, w: int) -> np.ndarray:
    """True outside the centred half-height by half-width rectangle of a shifted spectrum."""
    mask = np.ones((h, w), dtype=bool)
    hh, hw = max(h // 2, 1), max(w // 2, 1)
    r0 = h // 2 - hh // 2
    c0 = w // 2 - hw // 2
    mask[r0 : r0 + hh, c0 : c0 + hw] = False
    return mask


def hf_energy(image) -> float:
    """Sum of centred-spectrum magnitudes (divided by H*W) outside the central quarter area."""
    y = _luma(image)
    if y.size == 0:
        raise ValueError("empty image")
    h, w = y.shape
    spectrum = np.abs(np.fft.fftshift(np.fft.fft2(y))) / (h * w)
    return float(spectrum[high_frequency_mask(h, w)].sum())


def hf_ratio(candidate, reference) -> float:
    if np.shape(candidate) != np.shape(reference):
        raise ValueError("candidate and reference must share dimensions")
    ref = hf_energy(reference)
    if ref == 0:
        raise ValueError("reference image has zero high-frequency energy")
    return hf_energy(candidate) / ref


def _to_grid(frame: np.ndarray) -> np.ndarray:
    return frame[None] if frame.ndim == 2 else np.moveaxis(frame, -1, 0)


def pair_warping_error(frame_prev, frame_next, flow: Flow) -> float:
    """Mean L1 between ``frame_next`` and ``frame_prev`` pulled back along ``flow``, on in-bounds targets."""
    prev = np.asarray(frame_prev, dtype=np.float64)
    nxt = np.asarray(frame_next, dtype=np.float64)
    h, w = prev.shape[:2]
    if flow.resolution != (h, w):
        raise ValueError(f"flow resolution {flow.resolution} != frame size {(h, w)}")
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + flow.dx
    ty = ys + flow.dy
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    if not valid.any():
        return 0.0
    warped = backward_warp(_to_grid(prev), flow).astype(np.float64)
    diff = np.abs(_to_grid(nxt) - warped)
    return float(diff[:, valid].mean())


def warping_error(seq: FrameSequence | Sequence[np.ndarray], flow_fn: FlowFn) -> float:
    """Mean over consecutive pairs of the masked L1 warping residual.

    ``flow_fn(frame_next, frame_prev)`` returns the flow from frame ``k+1``
    to frame ``k`` at image resolution.
    """
    if not isinstance(seq, FrameSequence):
        seq = FrameSequence(tuple(seq))
    errs = [pair_warping_error(a, b, flow_fn(b, a)) for a, b in zip(seq.frames[:-1], seq.frames[1:])]
    return float(np.mean(errs))


def we_mid(seq: FrameSequence | Sequence[np.ndarray], flow_fn: FlowFn) -> float:
    """Warping error of the middle frame against each input, averaged."""
    if not isinstance(seq, FrameSequence):
        seq = FrameSequence(tuple(seq))
    if len(seq) < 3:
        raise ValueError("WE_mid needs at least three frames")
    first, mid, last = seq.frames[0], seq.middle, seq.frames[-1]
    return 0.5 * (warping_error((first, mid), flow_fn) + warping_error((mid, last), flow_fn))


def zero_flow(frame_next, frame_prev) -> Flow:
    h, w = np.shape(frame_next)[:2]
    return Flow.zeros(h, w)
