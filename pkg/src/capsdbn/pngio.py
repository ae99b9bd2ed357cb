"""8-bit PNG ingestion and emission for (channels, height, width) patches."""

import os

import numpy as np
from PIL import Image

from .errors import ConfigurationError


def write_png(path, pixels):
    """Write a (C, H, W) float array in [0, 1] as an 8-bit PNG (C = 1 or 3)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ConfigurationError(f"pixels must be (1|3, H, W), got {pixels.shape}")
    u8 = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[0] == 1:
        image = Image.fromarray(u8[0], mode="L")
    else:
        image = Image.fromarray(u8.transpose(1, 2, 0), mode="RGB")
    tmp = f"{path}.tmp"
    image.save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path, channels=3):
    """Read an 8-bit PNG into a (channels, H, W) float32 array in [0, 1]."""
    if not os.path.exists(path):
        raise ConfigurationError(f"image {path} does not exist")
    with Image.open(path) as image:
        converted = image.convert("RGB" if channels == 3 else "L")
        u8 = np.asarray(converted, dtype=np.uint8)
    if channels == 1:
        u8 = u8[None, :, :]
    else:
        u8 = u8.transpose(2, 0, 1)
    return (u8.astype(np.float32)) / 255.0
