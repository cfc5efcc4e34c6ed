"""Toy diffusion UNet with composable local and global control adapters."""

__version__ = "0.1.0"
