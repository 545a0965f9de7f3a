"""Image I/O and resampling helpers.

Color convention: files on disk are display-encoded (sRGB) 8-bit; everything
in memory past the loaders is linear float in [0, 1].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadFactor


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def load_srgb(path) -> np.ndarray:
    """8-bit image file -> (H, W, 3) sRGB floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_linear(path) -> np.ndarray:
    return srgb_to_linear(load_srgb(path))


def save_srgb(path, srgb: np.ndarray) -> None:
    arr = np.clip(np.asarray(srgb), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def save_linear(path, linear: np.ndarray) -> None:
    save_srgb(path, linear_to_srgb(linear))


def save_gray16(path, values: np.ndarray, scale: float) -> None:
    """16-bit single-channel PNG; ``values`` divided by ``scale`` then clipped."""
    arr = np.clip(np.asarray(values, dtype=np.float64) / scale, 0.0, 1.0)
    Image.fromarray((arr * 65535.0 + 0.5).astype(np.uint16)).save(path)


def save_mask_png(path, valid: np.ndarray) -> None:
    Image.fromarray(np.where(valid, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def box_downscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average over exact factor x factor blocks; trailing remainder rows
    and columns are dropped (floor semantics)."""
    if factor < 1 or int(factor) != factor:
        raise BadFactor(f"downscale factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return img
    h, w = img.shape[:2]
    oh, ow = h // factor, w // factor
    img = img[: oh * factor, : ow * factor]
    if img.ndim == 2:
        return img.reshape(oh, factor, ow, factor).mean(axis=(1, 3))
    return img.reshape(oh, factor, ow, factor, img.shape[2]).mean(axis=(1, 3))
