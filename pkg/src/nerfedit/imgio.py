"""PNG helpers: [0,1] float images and [-1,1] normal maps to/from disk."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    """Save an (H,W,3) float image in [0,1]."""
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def save_normal_png(normal: np.ndarray, path) -> None:
    """Save an (H,W,3) normal map, mapping [-1,1] to [0,255]."""
    save_png((np.asarray(normal) + 1.0) / 2.0, path)


def load_png(path) -> np.ndarray:
    """Load a PNG as an (H,W,3) float array in [0,1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0
