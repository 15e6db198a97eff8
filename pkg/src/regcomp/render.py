"""Heatmap overlays and on-disk export of dependency and segment maps."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .bundle import atomic_write_bytes
from .regional import DependencyMap
from .segmentation import SegmentMap

_LUMA = np.array([0.299, 0.587, 0.114])


def grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == 1:
        return image[0]
    return np.tensordot(_LUMA, image[:3], axes=1)


def colormap(values: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1) ramp; returns ``(3, H, W)``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1)
    return np.stack([v, np.zeros_like(v), 1.0 - v])


def render_heatmap(image: np.ndarray, dmap, alpha: float = 0.5) -> np.ndarray:
    """Blend the coloured normalised map over a grayscale copy of ``image``."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    norm = getattr(dmap, "normalized", dmap)
    gray = grayscale(image)
    if gray.shape != np.shape(norm):
        raise ValueError(f"map shape {np.shape(norm)} does not match image {gray.shape}")
    return (1 - alpha) * np.repeat(gray[None], 3, axis=0) + alpha * colormap(norm)


def _save_image(path, array: np.ndarray) -> None:
    # uint16 arrays come out as 16-bit grayscale PNGs
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}.png")
    Image.fromarray(array).save(tmp, format="PNG")
    os.replace(tmp, path)


def save_rgb_png(path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    _save_image(path, np.ascontiguousarray(data))


def save_map_png(path, dmap: DependencyMap, params: dict | None = None,
                 sidecar: bool = True) -> None:
    """16-bit grayscale PNG of the normalised map plus a ``.json`` sidecar."""
    data = np.round(dmap.normalized * 65535).astype(np.uint16)
    _save_image(path, data)
    if sidecar:
        record = {"method": dmap.method, "params": params or {}, "wall_time": dmap.seconds,
                  "raw_min": float(dmap.raw.min()), "raw_max": float(dmap.raw.max()),
                  "info": {k: v for k, v in dmap.info.items() if isinstance(v, (int, float, str, list))}}
        atomic_write_bytes(str(path) + ".json", json.dumps(record, indent=1, sort_keys=True).encode())


def load_map_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0


def segment_colors(segmap: SegmentMap, seed: int = 0) -> np.ndarray:
    """False-colour ``(3, H, W)`` rendering with one fixed random colour per segment."""
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.15, 1.0, size=(segmap.n_segments, 3))
    return palette[segmap.labels].transpose(2, 0, 1)


def save_segment_png(path, segmap: SegmentMap) -> None:
    save_rgb_png(path, segment_colors(segmap))
