"""Adapter exposing a diffusers latent-diffusion model through :class:`DiffusionBackend`.

Only imported for ``pretrained:MODEL_ID`` specs, so diffusers stays optional.
Taps and key/value overrides reach the attention processors through a
context variable that is set for the duration of one forward pass, which
keeps concurrent passes on different threads independent.
"""

from __future__ import annotations

import contextvars

import torch
import torch.nn.functional as F
from torch import nn

from latent_interp.backend.base import BackendError, Conditioning, DiffusionBackend, PassContext
from latent_interp.scheduler import make_schedule

_PASS: contextvars.ContextVar[PassContext | None] = contextvars.ContextVar("latent_interp_pass", default=None)


class TappedSelfAttention:
    """Attention processor that records and optionally replaces self-attention keys/values.

    Cross-attention calls (``encoder_hidden_states`` given) pass through untouched.
    """

    def __init__(self, layer_id: str):
        self.layer_id = layer_id

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **_):
        ctx = _PASS.get()
        spatial = hidden_states.ndim == 4
        if spatial:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        residual = hidden_states
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        context = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        q = attn.to_q(hidden_states)
        k = attn.to_k(context)
        v = attn.to_v(context)
        if ctx is not None and encoder_hidden_states is None:
            if self.layer_id in ctx.tap_layers:
                ctx.taps[self.layer_id] = (k.detach().clone(), v.detach().clone())
            if self.layer_id in ctx.kv_override:
                ko, vo = ctx.kv_override[self.layer_id]
                k = ko.to(q.device, q.dtype).expand(q.shape[0], -1, -1)
                v = vo.to(q.device, q.dtype).expand(q.shape[0], -1, -1)
        heads = attn.heads

        def split(x):
            return x.view(x.shape[0], -1, heads, x.shape[-1] // heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        out = out.transpose(1, 2).reshape(q.shape[0], -1, heads * out.shape[-1])
        out = attn.to_out[1](attn.to_out[0](out))
        if spatial:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
            residual = residual.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class _Denoiser(nn.Module):
    """U-Net plus the VAE so one module handle carries every weight."""

    def __init__(self, unet, vae):
        super().__init__()
        self.unet = unet
        self.vae = vae
        self._feature_hooks()

    def _feature_hooks(self):
        for i, block in enumerate(self.unet.up_blocks):
            name = f"up_block_{i + 1}"

            def hook(_module, _inputs, output, name=name):
                ctx = _PASS.get()
                if ctx is not None and name in ctx.feature_blocks:
                    ctx.features[name] = (output[0] if isinstance(output, tuple) else output).detach().clone()

            block.register_forward_hook(hook)


class PretrainedBackend(DiffusionBackend):
    downsample_factor = 8

    def __init__(self, unet, vae, tokenizer=None, text_encoder=None, scheduler_config=None, identifier="pretrained"):
        self.identifier = identifier
        for name, module in unet.attn_processors.items():
            layer = name.removesuffix(".processor")
            unet.get_submodule(layer).set_processor(TappedSelfAttention(layer))
        self.module = _Denoiser(unet, vae).eval()
        self.tokenizer = tokenizer
        self.text_encoder = text_encoder
        self.latent_channels = int(unet.config.in_channels)
        self.scaling_factor = float(getattr(vae.config, "scaling_factor", 0.18215))
        cfg = dict(scheduler_config or {})
        spacing = cfg.get("beta_schedule", "scaled_linear")
        if spacing not in ("linear", "scaled_linear"):
            raise BackendError(f"unsupported beta schedule {spacing!r}")
        self.schedule = make_schedule(
            int(cfg.get("num_train_timesteps", 1000)),
            50,
            float(cfg.get("beta_start", 0.00085)),
            float(cfg.get("beta_end", 0.012)),
            spacing,
        )
        self._empty = self.encode_prompt("")

    def block_ids(self):
        return tuple(f"up_block_{i + 1}" for i in range(len(self.module.unet.up_blocks)))

    def attention_layer_ids(self):
        names = (n.removesuffix(".processor") for n in self.module.unet.attn_processors)
        return tuple(n for n in names if n.startswith("up_blocks.") and n.endswith("attn1"))

    def lora_targets(self):
        out = {}
        for name in self.module.unet.attn_processors:
            layer = name.removesuffix(".processor")
            attn = self.module.unet.get_submodule(layer)
            for proj, mod in (("to_q", attn.to_q), ("to_k", attn.to_k), ("to_v", attn.to_v), ("to_out.0", attn.to_out[0])):
                out[f"unet.{layer}.{proj}"] = mod
        return out

    def encode_prompt(self, prompt: str = "") -> Conditioning:
        if self.tokenizer is None or self.text_encoder is None:
            width = int(self.module.unet.config.cross_attention_dim)
            return Conditioning(prompt, torch.zeros(1, 77, width))
        tokens = self.tokenizer(
            [prompt], padding="max_length", max_length=self.tokenizer.model_max_length, truncation=True, return_tensors="pt"
        )
        with torch.no_grad():
            emb = self.text_encoder(tokens.input_ids)[0]
        return Conditioning(prompt, emb.float().clone())

    def _eps(self, z, timestep, cond, ctx):
        cond = cond or self._empty
        token = _PASS.set(ctx)
        try:
            emb = cond.embedding.to(z.dtype).expand(z.shape[0], -1, -1)
            return self.module.unet(z, timestep, encoder_hidden_states=emb).sample
        finally:
            _PASS.reset(token)

    def _encode(self, image):
        posterior = self.module.vae.encode(image * 2.0 - 1.0).latent_dist
        return posterior.mean * self.scaling_factor

    def _decode(self, z):
        img = self.module.vae.decode(z / self.scaling_factor).sample
        return ((img + 1.0) * 0.5).clamp(0.0, 1.0)


def load_pretrained(model_id: str, **_) -> PretrainedBackend:
    """Load a diffusers Stable-Diffusion-style checkpoint (local path or hub id)."""
    try:
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from diffusers.schedulers import DDIMScheduler
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as exc:
        raise BackendError("the pretrained backend needs the 'pretrained' extra (diffusers, transformers)") from exc
    try:
        unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet")
        vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae")
        tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
        text_encoder = CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder")
        scheduler = DDIMScheduler.from_pretrained(model_id, subfolder="scheduler")
    except Exception as exc:  # hub, filesystem and format errors all mean "cannot load"
        raise BackendError(f"cannot load pretrained model {model_id!r}: {exc}") from exc
    return PretrainedBackend(unet, vae, tokenizer, text_encoder, dict(scheduler.config), identifier=f"pretrained:{model_id}")
