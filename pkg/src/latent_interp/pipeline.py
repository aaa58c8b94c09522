"""End-to-end interpolation between two images."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from latent_interp import _kernels
from latent_interp.attention import denoise_with_replacement, record_bank
from latent_interp.config import RunConfig
from latent_interp.flow import Flow, estimate_flow, extract_correspondence_features, load_flow, resample_flow
from latent_interp.fusion import FusionInputs, fuse
from latent_interp.io import frame_hash
from latent_interp.lora import LoraParams, apply_lora, fit_pair_lora
from latent_interp.metrics import FrameSequence
from latent_interp.sampling import ddim_invert, ddim_sample
from latent_interp.scheduler import respace

log = logging.getLogger(__name__)


@dataclass
class InterpolationRun:
    sequence: FrameSequence
    deltas: list[float]
    flow_0to1: Flow
    flow_1to0: Flow
    backend_id: str
    timing: dict[str, float] = field(default_factory=dict)
    lora: LoraParams | None = None

    def manifest(self, cfg: RunConfig, input_hashes: list[str] | None = None) -> dict[str, Any]:
        frames = self.sequence.frames
        return {
            "config": cfg.to_dict(),
            "deltas": self.deltas,
            "frame_count": len(frames),
            "backend": self.backend_id,
            "kernels": _kernels.IMPLEMENTATION,
            "timing": {k: round(v, 4) for k, v in self.timing.items()},
            "hashes": {
                "inputs": input_hashes or [frame_hash(frames[0]), frame_hash(frames[-1])],
                "frames": [frame_hash(f) for f in frames],
            },
        }


def _flows(cfg: RunConfig, inv0, inv1, latent_hw):
    if cfg.flow_source == "external":
        f01 = load_flow(cfg.flow_0to1)
        f10 = load_flow(cfg.flow_1to0)
    else:
        f01 = estimate_flow(inv0.features, inv1.features)
        f10 = estimate_flow(inv1.features, inv0.features)
    return resample_flow(f01, latent_hw), resample_flow(f10, latent_hw)


def prepare_backend(image0, image1, cfg: RunConfig, backend, cond):
    """Encode both inputs and, if enabled, fit and apply the pair adapter."""
    z0 = backend.encode_image(image0)
    z1 = backend.encode_image(image1)
    params = None
    if cfg.lora_enabled:
        params = fit_pair_lora(
            backend, z0, z1, cond, cfg.lora_rank, cfg.lora_lr, cfg.lora_steps, cfg.seed, cfg.lora_scaling
        )
        backend = apply_lora(backend, params)
    return backend, z0, z1, params


def run_interpolation(image0, image1, cfg: RunConfig, backend) -> InterpolationRun:
    image0 = np.asarray(image0, dtype=np.float32)
    image1 = np.asarray(image1, dtype=np.float32)
    if image0.shape != image1.shape:
        raise ValueError(f"input images differ in size: {image0.shape} vs {image1.shape}")
    cfg.validate()
    timing: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timing[name] = now - clock
        clock = now

    sched = respace(backend.schedule, cfg.ddim_steps)
    cond = backend.encode_prompt(cfg.prompt)
    backend, z0, z1, params = prepare_backend(image0, image1, cfg, backend, cond)
    lap("lora")

    kw = dict(feature_step=cfg.feature_step, feature_block=cfg.feature_block)
    inv0 = ddim_invert(z0, backend, sched, cfg.fusion_step, cond, **kw)
    inv1 = ddim_invert(z1, backend, sched, cfg.fusion_step, cond, **kw)
    lap("inversion")

    f01, f10 = _flows(cfg, inv0, inv1, z0.shape[1:])
    lap("flow")

    layers = tuple(cfg.attn_layers) or tuple(backend.attention_layer_ids())
    bank = None
    if cfg.attn_replace:
        bank = record_bank(inv0.final, inv1.final, sched, backend, cond, cfg.fusion_step, layers)
    lap("bank")

    inputs = FusionInputs(
        inv0.final, inv1.final, inv0.eps_final, inv1.eps_final, f01, f10, sched, cfg.fusion_step, cfg.splat_temperature
    )
    step_range = tuple(cfg.attn_step_range) or None

    def render(delta: float) -> np.ndarray:
        z_delta = fuse(inputs, delta, cfg.fusion_mode)
        if bank is not None:
            z_clean = denoise_with_replacement(z_delta, bank, sched, backend, cond, cfg.fusion_step, step_range)
        else:
            z_clean = ddim_sample(z_delta, backend, sched, cfg.fusion_step, cond).latent
        return backend.decode_latent(z_clean)

    deltas = cfg.deltas
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            middle = list(pool.map(render, deltas))
    else:
        middle = [render(d) for d in deltas]
    lap("frames")
    log.info("rendered %d frames in %.2fs", len(middle), timing["frames"])

    sequence = FrameSequence((image0, *middle, image1))
    return InterpolationRun(sequence, deltas, f01, f10, backend.identifier, timing, params)


def interpolate(image0, image1, cfg: RunConfig, backend) -> FrameSequence:
    """``[image0, frames at k/(n+1) for k = 1..n, image1]``."""
    return run_interpolation(image0, image1, cfg, backend).sequence


def reconstruct(image, cfg: RunConfig, backend) -> np.ndarray:
    """Invert one image to the fusion step and denoise it back without any fusion.

    Uses the same adapter fitting as :func:`run_interpolation` on the pair
    ``(image, image)``, so it is the reference for a degenerate run.
    """
    image = np.asarray(image, dtype=np.float32)
    sched = respace(backend.schedule, cfg.ddim_steps)
    cond = backend.encode_prompt(cfg.prompt)
    backend, z, _, _ = prepare_backend(image, image, cfg, backend, cond)
    inv = ddim_invert(z, backend, sched, cfg.fusion_step, cond)
    return backend.decode_latent(ddim_sample(inv.final, backend, sched, cfg.fusion_step, cond).latent)


def diffusion_flow_fn(backend, cfg: RunConfig | None = None):
    """Flow callback for the warping metrics, backed by the feature-correspondence estimator."""
    cfg = cfg or RunConfig(lora_enabled=False)
    sched = respace(backend.schedule, cfg.ddim_steps)
    cond = backend.encode_prompt(cfg.prompt)

    def flow_fn(frame_next, frame_prev) -> Flow:
        h, w = np.shape(frame_next)[:2]
        za = backend.encode_image(np.clip(frame_next, 0, 1))
        zb = backend.encode_image(np.clip(frame_prev, 0, 1))
        fa, fb = extract_correspondence_features(za, zb, backend, sched, cfg.feature_step, cfg.feature_block, cond)
        return resample_flow(estimate_flow(fa, fb), (h, w))

    return flow_fn
