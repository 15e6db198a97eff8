"""Synthetic benchmark generation and the PNG + manifest dataset format.

Manifest lines are whitespace separated::

    <relative image path> <label> <split> [<relative mask path>]

Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .perception import SPLITS, LabeledDataset

__all__ = ["SyntheticSpec", "generate_synthetic", "write_dataset", "load_dataset",
           "read_png", "write_png", "DatasetError", "TEXTURES"]

TEXTURES = ("checker", "stripes", "dots", "vivid")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    n_classes: int = 3
    patch_fraction: tuple = (0.08, 0.25)
    n_train: int = 300
    n_calibration: int = 60
    n_tune: int = 60
    n_test: int = 60
    textures: tuple = TEXTURES
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.patch_fraction
        if not 0 < lo <= hi:
            raise ValueError("patch_fraction must satisfy 0 < lo <= hi")
        if hi >= 1:
            raise ValueError("patch larger than image")
        if self.image_size < 8 or self.image_size % 4:
            raise ValueError("image_size must be a multiple of 4 and at least 8")
        if min(self.n_train, self.n_calibration, self.n_tune, self.n_test) < 0:
            raise ValueError("split counts must be nonnegative")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        unknown = set(self.textures) - set(TEXTURES)
        if unknown or not self.textures:
            raise ValueError(f"unknown textures {sorted(unknown)}")


# ---------------------------------------------------------------- drawing

def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _familiar_image(cls: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Background of a class colour family with a few same-family shapes.

    Familiar colours stay in saturation [0.3, 0.6] and value [0.35, 0.75].
    """
    n = spec.image_size
    hue = 0.08 + cls / spec.n_classes
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = _hsv(hue + rng.uniform(-0.03, 0.03), rng.uniform(0.35, 0.55), rng.uniform(0.45, 0.65))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) * rng.uniform(0.0, 0.15)
    img = base[:, None, None] * (1.0 + ramp[None])
    for _ in range(rng.integers(1, 4)):
        shade = _hsv(hue + rng.uniform(-0.03, 0.03), rng.uniform(0.3, 0.6), rng.uniform(0.35, 0.75))
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.1, 0.3, size=2)
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[:, blob] = shade[:, None]
    img += rng.normal(0, 0.015, size=img.shape)
    return img


def _texture(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    if kind == "checker":
        period = rng.integers(6, 11)
        a = _hsv(rng.uniform(0.85, 0.95), 1.0, 1.0)
        b = np.array([0.97, 0.97, 0.97])
        sel = ((yy // (period / 2)) + (xx // (period / 2))) % 2 == 0
    elif kind == "stripes":
        period = rng.uniform(6, 10)
        theta = rng.uniform(0, np.pi)
        a = _hsv(rng.uniform(0.14, 0.17), 1.0, 1.0)
        b = np.array([0.05, 0.05, 0.08])
        sel = np.mod(np.cos(theta) * xx + np.sin(theta) * yy, period) < period / 2
    elif kind == "dots":
        period = rng.integers(6, 9)
        a = _hsv(rng.uniform(0.97, 1.02), 1.0, 0.95)
        b = np.array([0.98, 0.98, 0.95])
        sel = ((np.mod(yy, period) - period / 2) ** 2 + (np.mod(xx, period) - period / 2) ** 2) <= (period / 3.2) ** 2
    elif kind == "vivid":
        a = _hsv(rng.uniform(0.45, 0.52), 1.0, 1.0)
        b = _hsv(rng.uniform(0.88, 0.95), 0.9, 1.0)
        sel = (xx + yy) < rng.uniform(0.5, 1.5) * n
    else:
        raise ValueError(kind)
    return np.where(sel[None], a[:, None, None], b[:, None, None])


def _patch_mask(n: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    area = frac * n * n
    aspect = rng.uniform(0.6, 1.6)
    if rng.random() < 0.5:
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(area / max(h, 1)))
        if h > n or w > n or h < 1 or w < 1:
            raise ValueError("patch larger than image")
        y0 = rng.integers(0, n - h + 1)
        x0 = rng.integers(0, n - w + 1)
        mask = np.zeros((n, n), bool)
        mask[y0:y0 + h, x0:x0 + w] = True
        return mask
    ry = math.sqrt(area * aspect / math.pi)
    rx = area / (math.pi * ry)
    if 2 * ry > n or 2 * rx > n:
        raise ValueError("patch larger than image")
    cy = rng.uniform(ry - 0.5, n - 0.5 - ry)
    cx = rng.uniform(rx - 0.5, n - 0.5 - rx)
    yy, xx = np.mgrid[0:n, 0:n]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _max_extent(frac: float) -> float:
    # largest side (as a fraction of the image side) any patch shape can reach
    return max(math.sqrt(frac * 1.6), math.sqrt(frac / 0.6), 2 * math.sqrt(frac * 1.6 / math.pi))


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> LabeledDataset:
    """Familiar-only train/calibration images; tune/test images carry one unfamiliar patch.

    Pixel values are quantised to 8 bits so PNG round trips are exact. Labels
    of patched images are their background class.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.image_size
    lo, hi = spec.patch_fraction
    if _max_extent(hi) > 1.0:
        raise ValueError("patch larger than image")
    images, labels, splits, masks = [], [], [], []
    counts = {"train": spec.n_train, "calibration": spec.n_calibration,
              "tune": spec.n_tune, "test": spec.n_test}
    for split, count in counts.items():
        # balanced, shuffled class assignment per split
        cls = rng.permutation(np.arange(count) % spec.n_classes)
        for c in cls:
            img = _familiar_image(int(c), spec, rng)
            mask = None
            if split in ("tune", "test"):
                mask = _patch_mask(n, rng.uniform(lo, hi), rng)
                tex = _texture(spec.textures[rng.integers(len(spec.textures))], n, rng)
                tex = tex + rng.normal(0, 0.015, size=tex.shape)
                img = np.where(mask[None], tex, img)
            images.append(_quantize(img))
            labels.append(int(c))
            splits.append(split)
            masks.append(mask)
    images = np.array(images) if images else np.zeros((0, 3, n, n))
    return LabeledDataset(images, np.array(labels, dtype=np.int64), np.array(splits, dtype=object),
                          masks, spec.n_classes)


# ---------------------------------------------------------------- PNG I/O

def read_png(path) -> np.ndarray:
    """Image as ``(C, H, W)`` floats in [0, 1]; 8- and 16-bit PNGs supported."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return arr[None]
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGBA" if "A" in im.mode else "RGB").convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def write_png(path, image: np.ndarray) -> None:
    """Write ``(C, H, W)`` or ``(H, W)`` floats in [0, 1] as an 8-bit PNG."""
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    tmp = f"{path}.tmp{os.getpid()}.png"
    Image.fromarray(data).save(tmp, format="PNG")
    os.replace(tmp, path)


def write_dataset(data: LabeledDataset, root) -> Path:
    """Write images, masks and ``manifest.txt`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(data)):
        rel = f"images/{data.splits[i]}_{i:05d}.png"
        write_png(root / rel, data.images[i])
        line = f"{rel} {data.labels[i]} {data.splits[i]}"
        if data.masks[i] is not None:
            mrel = f"images/{data.splits[i]}_{i:05d}_mask.png"
            write_png(root / mrel, data.masks[i])
            line += f" {mrel}"
        lines.append(line)
    header = f"# n_classes {data.n_classes}\n"
    (root / "manifest.txt").write_text(header + "\n".join(lines) + "\n")
    return root


def load_dataset(path, n_classes: int | None = None) -> LabeledDataset:
    """Read a dataset directory (or manifest path) written by :func:`write_dataset`.

    Errors name the manifest line that caused them.
    """
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    root = manifest.parent
    if not manifest.exists():
        raise DatasetError(f"{manifest}: manifest not found")
    images, labels, splits, masks = [], [], [], []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("# n_classes") and n_classes is None:
            n_classes = int(line.split()[-1])
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        where = f"{manifest}:{lineno}"
        if len(parts) not in (3, 4):
            raise DatasetError(f"{where}: expected 3 or 4 fields, got {len(parts)}")
        img_path = root / parts[0]
        if not img_path.exists():
            raise DatasetError(f"{where}: missing image {img_path}")
        try:
            label = int(parts[1])
        except ValueError:
            raise DatasetError(f"{where}: label {parts[1]!r} is not an integer") from None
        if label < 0 or (n_classes is not None and label >= n_classes):
            raise DatasetError(f"{where}: label {label} outside 0..{(n_classes or 0) - 1}")
        if parts[2] not in SPLITS:
            raise DatasetError(f"{where}: unknown split {parts[2]!r}")
        img = read_png(img_path)
        if images and img.shape != images[0].shape:
            raise DatasetError(f"{where}: image shape {img.shape} differs from {images[0].shape}")
        mask = None
        if len(parts) == 4:
            mpath = root / parts[3]
            if not mpath.exists():
                raise DatasetError(f"{where}: missing mask {mpath}")
            m = read_png(mpath)
            if m.shape[0] != 1:
                m = m.max(axis=0, keepdims=True)
            if m.shape[1:] != img.shape[1:]:
                raise DatasetError(f"{where}: mask shape {m.shape[1:]} differs from image {img.shape[1:]}")
            mask = m[0] > 0
        images.append(img)
        labels.append(label)
        splits.append(parts[2])
        masks.append(mask)
    if not images:
        raise DatasetError(f"{manifest}: no entries")
    return LabeledDataset(np.array(images), np.array(labels), np.array(splits, dtype=object),
                          masks, n_classes)
