"""PNG helpers for images and condition maps.

Arrays are float32 in [0, 1], channel-first for color ((3, H, W)) or plain
(H, W) for single-channel maps. Saving quantizes to uint8; loading restores
float32. Quantization is round-half-away-from-zero via np.rint, so
save/load/save round-trips are byte-stable.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DomainError


def to_uint8(array):
    """Quantize a float array in [0, 1] to uint8."""
    a = np.asarray(array, dtype=np.float32)
    if a.size and (a.min() < -1e-4 or a.max() > 1 + 1e-4):
        raise DomainError(f"pixel values outside [0, 1]: min={a.min():.4f} max={a.max():.4f}")
    return np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(array):
    return np.asarray(array, dtype=np.float32) / 255.0


def save_png(array, path):
    """Write a (3, H, W) color or (H, W) gray float array as a PNG file."""
    a = to_uint8(array)
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise DomainError(f"expected (3, H, W) color array, got {a.shape}")
        img = Image.fromarray(np.transpose(a, (1, 2, 0)), mode="RGB")
    elif a.ndim == 2:
        img = Image.fromarray(a, mode="L")
    else:
        raise DomainError(f"expected 2-D or 3-D array, got shape {a.shape}")
    img.save(path, format="PNG")


def load_png(path):
    """Read a PNG back as float32, (3, H, W) for RGB or (H, W) for gray."""
    img = Image.open(path)
    a = np.asarray(img)
    if a.ndim == 3:
        return from_uint8(np.transpose(a[..., :3], (2, 0, 1)))
    return from_uint8(a)


def save_grid(images, path, columns=8, pad=1):
    """Tile a batch of (3, H, W) images into one PNG, row-major."""
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if not images:
        raise DomainError("empty image list")
    c, h, w = images[0].shape
    cols = min(columns, len(images))
    rows = (len(images) + cols - 1) // cols
    canvas = np.ones((c, rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.float32)
    for idx, im in enumerate(images):
        r, col = divmod(idx, cols)
        canvas[:, r * (h + pad):r * (h + pad) + h, col * (w + pad):col * (w + pad) + w] = im
    save_png(canvas, path)
