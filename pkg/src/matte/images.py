"""PNG image I/O shared by the CLI and tests.

Images persist as 8-bit RGB PNGs. The toy backend works on single-channel
float arrays in [0, 1], so grayscale loads average the channels and saves
replicate them.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError


def load_image_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"image file not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def load_image_gray(path) -> np.ndarray:
    rgb = load_image_rgb(path)
    return rgb.astype(np.float64).mean(axis=2) / 255.0


def save_image(path, array: np.ndarray) -> None:
    """Write a float [0,1] (gray or RGB) or uint8 array as an RGB PNG."""
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigError(f"cannot save image with shape {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(Path(path), format="PNG")
