"""Denoiser backends: a seeded toy network and an optional pretrained adapter."""

from latent_interp.backend.base import (
    AttentionTap,
    BackendError,
    BackendOutput,
    Conditioning,
    DiffusionBackend,
    FeatureMap,
    TapRequest,
)
from latent_interp.backend.toy import ToyBackend, make_toy_backend


def load_backend(source: str = "toy", seed: int = 0, **kwargs) -> DiffusionBackend:
    """Resolve ``toy``, ``toy:PATH`` (a DMTOYB01 blob) or ``pretrained:MODEL_ID``."""
    if source == "toy":
        return make_toy_backend(seed=seed, **kwargs)
    if source.startswith("toy:"):
        return ToyBackend.load(source[4:], **kwargs)
    if source.startswith("pretrained:"):
        from latent_interp.backend.pretrained import load_pretrained

        return load_pretrained(source.split(":", 1)[1], **kwargs)
    raise BackendError(f"unknown backend {source!r}")


__all__ = [
    "AttentionTap",
    "BackendError",
    "BackendOutput",
    "Conditioning",
    "DiffusionBackend",
    "FeatureMap",
    "TapRequest",
    "ToyBackend",
    "load_backend",
    "make_toy_backend",
]
