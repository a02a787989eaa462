"""Lossless PNG round-tripping for images and label masks.

Images are channels-first float arrays in [0,1], quantized as round(255*v)
into 8-bit grayscale (1 channel) or RGB (3 channels). Masks are stored as
single-channel PNGs holding raw class ids.
"""
from __future__ import annotations

import numpy as np
from PIL import Image


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got shape {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError(f"image intensities must lie in [0,1]; got [{image.min()}, {image.max()}]")
    quantized = np.round(255.0 * image).astype(np.uint8)
    if quantized.shape[0] == 1:
        Image.fromarray(quantized[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(np.transpose(quantized, (1, 2, 0)), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.transpose(arr, (2, 0, 1))
    return (arr.astype(np.float32) / 255.0).copy()


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got shape {mask.shape}")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: masks must be single-channel PNGs, found mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()
