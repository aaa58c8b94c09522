"""Intermediate-frame generation for image pairs with large motion by fusing
diffusion latents."""

__version__ = "0.1.0"
