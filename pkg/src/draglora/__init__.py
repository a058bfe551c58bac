"""Drag-based image editing on a toy diffusion model via online low-rank adapters."""

__version__ = "0.1.0"
