"""PNG writers for saliency maps, heat overlays and denoising strips."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# piecewise-linear "jet" anchors: value -> RGB
_JET = np.array([
    [0.00, 0.0, 0.0, 0.5],
    [0.11, 0.0, 0.0, 1.0],
    [0.34, 0.0, 1.0, 1.0],
    [0.65, 1.0, 1.0, 0.0],
    [0.89, 1.0, 0.0, 0.0],
    [1.00, 0.5, 0.0, 0.0],
])


def to_uint16(s_map: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(s_map, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)


def save_map(path, s_map: np.ndarray) -> Path:
    """Write a [0, 1] map as a 16-bit grayscale PNG."""
    path = Path(path)
    Image.fromarray(to_uint16(s_map)).save(path)
    return path


def load_map(path) -> np.ndarray:
    """Read a grayscale PNG (8 or 16 bit) back into [0, 1] float64."""
    with Image.open(path) as im:
        arr = np.asarray(im)
        if arr.ndim == 3:
            arr = np.asarray(im.convert("L"))
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    return arr.astype(np.float64) / scale


def colorize(s_map: np.ndarray) -> np.ndarray:
    """(H, W) in [0, 1] -> (H, W, 3) float RGB."""
    v = np.clip(np.asarray(s_map, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, _JET[:, 0], _JET[:, c]) for c in (1, 2, 3)], axis=-1)


def heat_overlay(image: np.ndarray, s_map: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a colorized map over an image; ``image`` is (3, H, W) or (H, W, 3) in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 3 and img.ndim == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    if img.shape[:2] != s_map.shape:
        raise ValueError(f"image {img.shape[:2]} and map {s_map.shape} differ in size")
    weight = alpha * np.clip(s_map, 0.0, 1.0)[..., None]
    out = (1.0 - weight) * img + weight * colorize(s_map)
    return np.rint(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_overlay(path, image: np.ndarray, s_map: np.ndarray, alpha: float = 0.5) -> Path:
    path = Path(path)
    Image.fromarray(heat_overlay(image, s_map, alpha), mode="RGB").save(path)
    return path


def strip(frames: list[np.ndarray]) -> np.ndarray:
    """Concatenate equally sized (H, W) frames left to right."""
    if not frames:
        raise ValueError("no frames to tile")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames differ in size: {sorted(shapes)}")
    return np.concatenate(frames, axis=1)


def save_strip(path, frames: list[np.ndarray]) -> Path:
    return save_map(path, strip(frames))
