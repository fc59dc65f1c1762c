"""Joint subject/style LoRA decomposition on a toy diffusion model."""

__version__ = "0.1.0"
