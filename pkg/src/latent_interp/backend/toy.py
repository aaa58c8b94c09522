"""Small deterministic stand-in for a latent-diffusion U-Net and autoencoder.

The noise prediction is ``sqrt(1 - alpha_t) * z + gain * net(z, t, cond)``.
The first term is the exact denoiser for a standard-normal latent prior; the
second is a seeded two-scale conv stack whose up-blocks carry one
self-attention layer each, so every tap of the real adapter exists here too.
The autoencoder is an 8x8 average pool followed by a fixed orthonormal
channel lift, decoded by the pseudo-inverse and bilinear upsampling.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from latent_interp.backend.base import (
    BackendError,
    Conditioning,
    DiffusionBackend,
    PassContext,
)
from latent_interp.scheduler import NoiseSchedule, make_schedule

TOY_MAGIC = b"DMTOYB01"
UP_BLOCKS = ("up_block_1", "up_block_2")


def timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = float(t) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1)])
    return emb


class SelfAttention(nn.Module):
    def __init__(self, dim: int, layer_id: str):
        super().__init__()
        self.layer_id = layer_id
        self.norm = nn.GroupNorm(1, dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: PassContext | None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (B, L, C)
        q = self.to_q(tokens)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        if ctx is not None:
            if self.layer_id in ctx.tap_layers:
                ctx.taps[self.layer_id] = (k.detach().clone(), v.detach().clone())
            if self.layer_id in ctx.kv_override:
                ko, vo = ctx.kv_override[self.layer_id]
                k = ko.to(q.dtype).expand(b, -1, -1)
                v = vo.to(q.dtype).expand(b, -1, -1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, dim)
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.temb = nn.Linear(dim, dim)
        self.norm2 = nn.GroupNorm(1, dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class UpBlock(nn.Module):
    def __init__(self, dim: int, name: str):
        super().__init__()
        self.res = ResBlock(dim)
        self.attn_0 = SelfAttention(dim, f"{name}.attn_0")

    def forward(self, x, temb, ctx):
        return self.attn_0(self.res(x, temb), ctx)


class ToyUNet(nn.Module):
    def __init__(self, latent_channels: int, feature_dim: int, num_train_steps: int = 1000, gain: float = 0.1):
        super().__init__()
        d = feature_dim
        self.feature_dim = d
        self.gain = gain
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.cond_proj = nn.Linear(d, d)
        self.conv_in = nn.Conv2d(latent_channels, d, 3, padding=1)
        self.down = nn.Conv2d(d, d, 3, stride=2, padding=1)
        self.mid = ResBlock(d)
        self.up_block_1 = UpBlock(d, "up_block_1")
        self.up_block_2 = UpBlock(d, "up_block_2")
        self.norm_out = nn.GroupNorm(1, d)
        self.conv_out = nn.Conv2d(d, latent_channels, 3, padding=1)
        self.register_buffer("sqrt_one_minus_alpha", torch.zeros(num_train_steps))
        # orthonormal lift from RGB to latent channels; the decoder applies its pseudo-inverse
        self.register_buffer("lift", torch.zeros(latent_channels, 3))

    def forward(self, z, t: int, cond_emb: torch.Tensor | None, ctx: PassContext | None):
        temb = self.time_mlp(timestep_embedding(t, self.feature_dim).to(z.dtype))[None]
        if cond_emb is not None:
            temb = temb + self.cond_proj(cond_emb.to(z.dtype))[None]
        skip = self.conv_in(z)
        h = self.mid(self.down(F.silu(skip)), temb)
        h = self.up_block_1(h, temb, ctx)
        if ctx is not None and "up_block_1" in ctx.feature_blocks:
            ctx.features["up_block_1"] = h.detach().clone()
        h = F.interpolate(h, size=skip.shape[-2:], mode="nearest") + skip
        h = self.up_block_2(h, temb, ctx)
        if ctx is not None and "up_block_2" in ctx.feature_blocks:
            ctx.features["up_block_2"] = h.detach().clone()
        residual = self.conv_out(F.silu(self.norm_out(h)))
        return self.sqrt_one_minus_alpha[t] * z + self.gain * residual


class ToyBackend(DiffusionBackend):
    downsample_factor = 8

    def __init__(self, module: ToyUNet, schedule: NoiseSchedule, seed: int | None = None):
        self.module = module.eval()
        self.schedule = schedule
        self.latent_channels = module.conv_in.in_channels
        self.feature_dim = module.feature_dim
        self.seed = seed
        self.identifier = f"toy:seed={seed},c={self.latent_channels},d={self.feature_dim}"
        lift = module.lift.double()
        self._unlift = torch.linalg.pinv(lift).float()

    def block_ids(self):
        return UP_BLOCKS

    def attention_layer_ids(self):
        return tuple(f"{b}.attn_0" for b in UP_BLOCKS)

    def lora_targets(self):
        out = {}
        for name in UP_BLOCKS:
            attn = getattr(self.module, name).attn_0
            for proj in ("to_q", "to_k", "to_v", "to_out"):
                out[f"{name}.attn_0.{proj}"] = getattr(attn, proj)
        return out

    def encode_prompt(self, prompt: str = "") -> Conditioning:
        if not prompt:
            emb = torch.zeros(self.feature_dim)
        else:
            digest = hashlib.sha256(prompt.encode("utf-8")).digest()
            g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
            emb = torch.randn(self.feature_dim, generator=g)
        return Conditioning(prompt, emb)

    def _eps(self, z, timestep, cond, ctx):
        return self.module(z, timestep, None if cond is None else cond.embedding, ctx)

    def _encode(self, image):
        pooled = F.avg_pool2d(image * 2.0 - 1.0, self.downsample_factor)
        return torch.einsum("ck,bkhw->bchw", self.module.lift, pooled)

    def _decode(self, z):
        rgb = torch.einsum("kc,bchw->bkhw", self._unlift, z)
        up = F.interpolate(rgb, scale_factor=self.downsample_factor, mode="bilinear", align_corners=False)
        return ((up + 1.0) * 0.5).clamp(0.0, 1.0)

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        """Write ``DMTOYB01`` then every state tensor as little-endian float32, in declaration order."""
        with open(path, "wb") as fh:
            fh.write(TOY_MAGIC)
            for tensor in self.module.state_dict().values():
                fh.write(tensor.detach().numpy().astype("<f4").tobytes())

    @classmethod
    def load(cls, path, latent_channels: int = 4, feature_dim: int = 32, schedule: NoiseSchedule | None = None):
        data = Path(path).read_bytes()
        if data[:8] != TOY_MAGIC:
            raise BackendError(f"{path}: missing DMTOYB01 header")
        schedule = schedule or make_schedule()
        module = ToyUNet(latent_channels, feature_dim, schedule.num_train_steps)
        state = module.state_dict()
        expected = sum(t.numel() for t in state.values())
        flat = np.frombuffer(data, dtype="<f4", offset=8)
        if flat.size != expected:
            raise BackendError(f"{path}: holds {flat.size} floats, architecture needs {expected}")
        offset = 0
        for name, tensor in state.items():
            n = tensor.numel()
            state[name] = torch.from_numpy(flat[offset : offset + n].copy()).reshape(tensor.shape)
            offset += n
        module.load_state_dict(state)
        return cls(module, schedule, seed=None)


def make_toy_backend(
    seed: int = 0,
    latent_channels: int = 4,
    feature_dim: int = 32,
    schedule: NoiseSchedule | None = None,
) -> ToyBackend:
    """Seeded toy backend; identical seeds give identical weights."""
    if latent_channels < 1 or feature_dim < 2:
        raise ValueError("latent_channels must be >= 1 and feature_dim >= 2")
    schedule = schedule or make_schedule()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = ToyUNet(latent_channels, feature_dim, schedule.num_train_steps)
    g = np.random.default_rng(seed)
    q, _ = np.linalg.qr(g.standard_normal((max(latent_channels, 3), 3)))
    lift = q[:latent_channels]
    with torch.no_grad():
        module.lift.copy_(torch.from_numpy(lift.astype(np.float32)))
        sq = np.sqrt(1.0 - schedule.alphas_cumprod)
        module.sqrt_one_minus_alpha.copy_(torch.from_numpy(sq.astype(np.float32)))
    return ToyBackend(module, schedule, seed=seed)
