from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
from torch import nn

from latent_interp.scheduler import CLEAN, NoiseSchedule


class BackendError(RuntimeError):
    """Raised when a backend cannot be constructed or loaded."""


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (D, h, w)
    source_block: str
    timestep: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"feature map must be (D, h, w) with positive sizes, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("feature map has non-finite entries")


@dataclass(frozen=True)
class AttentionTap:
    layer_id: str
    step_index: int | None
    keys: np.ndarray  # (L, d_k)
    values: np.ndarray  # (L, d_v)

    def __post_init__(self):
        if self.keys.ndim != 2 or self.values.ndim != 2 or self.keys.shape[0] != self.values.shape[0]:
            raise ValueError(f"keys {self.keys.shape} and values {self.values.shape} must share a row count")
        if self.keys.shape[1] < 1:
            raise ValueError("d_k must be positive")

    @property
    def d_k(self) -> int:
        return self.keys.shape[1]

    @property
    def d_v(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TapRequest:
    blocks: tuple[str, ...] = ()
    layers: tuple[str, ...] = ()


@dataclass
class BackendOutput:
    eps: np.ndarray
    features: dict[str, FeatureMap] = field(default_factory=dict)
    taps: list[AttentionTap] = field(default_factory=list)


@dataclass(frozen=True)
class Conditioning:
    """Opaque text-conditioning handle; computed once per run."""

    prompt: str
    embedding: torch.Tensor = field(repr=False, compare=False)


class PassContext:
    """Per-call recording and override state threaded through one forward pass."""

    def __init__(self, tap_layers=(), kv_override: Mapping | None = None, feature_blocks=()):
        self.tap_layers = set(tap_layers)
        self.kv_override = dict(kv_override or {})
        self.feature_blocks = set(feature_blocks)
        self.taps: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self.features: dict[str, torch.Tensor] = {}


class DiffusionBackend:
    """Denoiser/autoencoder pair with feature and attention taps.

    Subclasses provide ``module`` (an ``nn.Module``), the geometry attributes
    and the ``_eps`` / ``_encode`` / ``_decode`` torch hooks. Handles are
    treated as immutable; :meth:`with_module` derives a new one.
    """

    identifier: str = "backend"
    downsample_factor: int = 8
    latent_channels: int = 4
    schedule: NoiseSchedule
    module: nn.Module

    # -- subclass hooks ---------------------------------------------------
    def block_ids(self) -> tuple[str, ...]:
        raise NotImplementedError

    def attention_layer_ids(self) -> tuple[str, ...]:
        raise NotImplementedError

    def lora_targets(self) -> dict[str, nn.Linear]:
        raise NotImplementedError

    def encode_prompt(self, prompt: str = "") -> Conditioning:
        raise NotImplementedError

    def _eps(self, z: torch.Tensor, timestep: int, cond: Conditioning | None, ctx: PassContext | None) -> torch.Tensor:
        raise NotImplementedError

    def _encode(self, image: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    # -- public surface ---------------------------------------------------
    @property
    def trainable(self) -> bool:
        return bool(self.lora_targets())

    def with_module(self, module: nn.Module) -> "DiffusionBackend":
        clone = copy.copy(self)
        clone.module = module
        return clone

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.downsample_factor
        return (self.latent_channels, height // f, width // f)

    def torch_eps(self, z: torch.Tensor, timestep: int, cond: Conditioning | None = None) -> torch.Tensor:
        """Differentiable noise prediction on a ``(B, C, h, w)`` tensor."""
        return self._eps(z, max(int(timestep), 0), cond, None)

    def predict_noise(
        self,
        z_t,
        timestep: int,
        cond: Conditioning | None = None,
        tap_request: TapRequest | None = None,
        kv_override: Mapping[str, tuple] | None = None,
        step_index: int | None = None,
    ) -> BackendOutput:
        """Noise prediction for a single ``(C, h, w)`` latent at a training timestep.

        ``tap_request`` names up-blocks whose outputs are returned as
        :class:`FeatureMap` and attention layers whose keys/values are returned
        as :class:`AttentionTap`. ``kv_override`` maps attention layer ids to
        ``(K, V)`` matrices that replace the layer's own keys and values.
        """
        z = np.asarray(z_t)
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise ValueError(f"latent must be ({self.latent_channels}, h, w), got {z.shape}")
        tap_request = tap_request or TapRequest()
        known_blocks = set(self.block_ids())
        known_layers = set(self.attention_layer_ids())
        for b in tap_request.blocks:
            if b not in known_blocks:
                raise KeyError(f"unknown block {b!r}; available: {sorted(known_blocks)}")
        for name in (*tap_request.layers, *(kv_override or {})):
            if name not in known_layers:
                raise KeyError(f"unknown attention layer {name!r}; available: {sorted(known_layers)}")

        override = {}
        for name, (k, v) in (kv_override or {}).items():
            override[name] = (
                torch.as_tensor(np.asarray(k), dtype=torch.float32),
                torch.as_tensor(np.asarray(v), dtype=torch.float32),
            )
        ctx = PassContext(tap_request.layers, override, tap_request.blocks)
        t = 0 if timestep == CLEAN else int(timestep)
        if not 0 <= t < self.schedule.num_train_steps:
            raise ValueError(f"timestep {timestep} outside the training range")
        with torch.inference_mode():
            zt = torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))[None]
            eps = self._eps(zt, t, cond, ctx)[0].numpy().astype(np.float32)

        features = {
            name: FeatureMap(ctx.features[name][0].numpy().astype(np.float32), name, int(timestep))
            for name in tap_request.blocks
        }
        taps = [
            AttentionTap(name, step_index, ctx.taps[name][0][0].numpy(), ctx.taps[name][1][0].numpy())
            for name in tap_request.layers
        ]
        return BackendOutput(eps, features, taps)

    def encode_image(self, image) -> np.ndarray:
        """Deterministic latent (posterior mean) for an ``H x W x 3`` image in [0, 1]."""
        img = np.asarray(image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be H x W x 3, got {img.shape}")
        h, w, _ = img.shape
        f = self.downsample_factor
        if h % f or w % f or h == 0 or w == 0:
            raise ValueError(f"image size {h}x{w} not divisible by {f}")
        if img.min() < 0.0 or img.max() > 1.0 or not np.isfinite(img).all():
            raise ValueError("pixel values must lie in [0, 1]")
        with torch.inference_mode():
            x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
            return self._encode(x)[0].numpy().astype(np.float32)

    def decode_latent(self, z) -> np.ndarray:
        """``H x W x 3`` image in [0, 1] from a ``(C, h, w)`` latent."""
        z = np.asarray(z, dtype=np.float32)
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise ValueError(f"latent must be ({self.latent_channels}, h, w), got {z.shape}")
        with torch.inference_mode():
            img = self._decode(torch.from_numpy(np.ascontiguousarray(z))[None])[0]
        img = np.nan_to_num(img.numpy().transpose(1, 2, 0), nan=0.0)
        return np.clip(img, 0.0, 1.0).astype(np.float32)
