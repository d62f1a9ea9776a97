"""Lossless image exports for masks, response maps, noise and frequency maps."""
from __future__ import annotations

import os

import numpy as np
import torch
from PIL import Image, PngImagePlugin


def _arr(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def save_png16(values, path: str | os.PathLike, lo: float | None = None, hi: float | None = None) -> dict:
    """Write a 2-D map as 16-bit grayscale, linearly mapping [lo, hi] to [0, 65535].

    The range defaults to the map's own min/max and is stored in the PNG text chunks.
    """
    v = _arr(values)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {v.shape}")
    lo = float(v.min()) if lo is None else float(lo)
    hi = float(v.max()) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    q = np.round(np.clip((v - lo) / span, 0.0, 1.0) * 65535).astype(np.uint16)
    info = PngImagePlugin.PngInfo()
    info.add_text("lo", repr(lo))
    info.add_text("hi", repr(hi))
    Image.fromarray(q).save(path, pnginfo=info)
    return {"lo": lo, "hi": hi}


def load_png16(path: str | os.PathLike) -> np.ndarray:
    """Inverse of :func:`save_png16` (up to quantisation)."""
    img = Image.open(path)
    q = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.text.get("lo", 0.0)), float(img.text.get("hi", 65535.0))
    span = hi - lo if hi > lo else 1.0
    return lo + q / 65535.0 * span


def save_mask_png(mask, path: str | os.PathLike) -> None:
    """Binary [H, W] mask as a 1-bit PNG."""
    m = _arr(mask)
    if m.ndim == 3:
        m = m[0]
    Image.fromarray(m > 0.5).convert("1").save(path)


def load_mask_png(path: str | os.PathLike) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def save_noise_png(noise, epsilon_byte: float, path: str | os.PathLike) -> dict:
    """[3, H, W] noise in [-eps/255, eps/255] shifted/scaled to 8-bit RGB.

    pixel = round((noise / (eps/255) + 1) * 127.5); the scale is stored as metadata.
    """
    n = _arr(noise)
    e = float(epsilon_byte) / 255.0
    q = np.round((np.clip(n / e, -1, 1) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)
    info = PngImagePlugin.PngInfo()
    meta = {"offset": "127.5", "scale": repr(127.5 / e), "epsilon_byte": repr(float(epsilon_byte))}
    for k, v in meta.items():
        info.add_text(k, v)
    Image.fromarray(q).save(path, pnginfo=info)
    return meta


def load_noise_png(path: str | os.PathLike) -> np.ndarray:
    img = Image.open(path)
    q = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
    return (q - float(img.text["offset"])) / float(img.text["scale"])


def save_rgb_png(image, path: str | os.PathLike) -> None:
    """[3, H, W] float image in [0, 1] as 8-bit RGB."""
    a = _arr(image)
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)).save(path)
