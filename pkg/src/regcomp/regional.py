"""Regional incompetency dependency maps.

Five ways of attributing low competency to image regions, plus the average
of two maps. Each method returns a :class:`DependencyMap` whose raw scores
are constant over the region (grid cell or segment) they were computed for.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .competency import CompetencyEstimator, competency_gradient, competency_score
from .inpainter import InpainterDecoder, mask_with_ones
from .perception import PerceptionModel, extract_features
from .segmentation import SegmentMap, gaussian_smooth

__all__ = ["DependencyMap", "FillStrategy", "FILL_KINDS", "METHODS", "normalize",
           "resize_bilinear", "grid_cells", "cropping_map", "masking_map",
           "perturbation_map", "gradient_map", "reconstruction_map", "combine_maps"]

FILL_KINDS = ("zeros", "ones", "mean", "uniform", "gaussian", "blur", "noise")
METHODS = ("cropping", "masking", "perturbation", "gradients", "reconstruction", "combined")


def normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


@dataclass
class DependencyMap:
    raw: np.ndarray
    method: str
    seconds: float = 0.0
    segmap: SegmentMap | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.normalized = normalize(self.raw)

    @property
    def shape(self):
        return self.raw.shape


@dataclass(frozen=True)
class FillStrategy:
    """How replaced pixels are filled.

    ``mean`` uses the per-channel mean of the pixels being replaced, so it
    is a no-op on a constant region. ``gaussian`` draws from N(0.5, 0.25^2)
    clipped to [0, 1]; ``noise`` adds N(0, noise_std^2) to the originals.
    """

    kind: str = "zeros"
    blur_sigma: float = 3.0
    noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FILL_KINDS:
            raise ValueError(f"unknown fill strategy {self.kind!r}; choose from {FILL_KINDS}")

    def apply(self, image: np.ndarray, region: np.ndarray, key: int = 0) -> np.ndarray:
        """Copy of ``image`` with pixels under boolean ``region`` replaced.

        ``key`` separates the random streams of different regions of one image.
        """
        out = np.array(image, dtype=np.float64, copy=True)
        if not region.any():
            return out
        c = out.shape[0]
        count = int(region.sum())
        kind = self.kind
        if kind == "zeros":
            out[:, region] = 0.0
        elif kind == "ones":
            out[:, region] = 1.0
        elif kind == "mean":
            vals = out[:, region]
            lo, hi = vals.min(axis=1), vals.max(axis=1)
            # summation rounding must not move a constant channel off its value
            out[:, region] = np.where(lo == hi, lo, np.clip(vals.mean(axis=1), lo, hi))[:, None]
        elif kind == "blur":
            out[:, region] = gaussian_smooth(image, self.blur_sigma)[:, region]
        else:
            rng = np.random.default_rng([self.seed, key])
            if kind == "uniform":
                out[:, region] = rng.random((c, count))
            elif kind == "gaussian":
                out[:, region] = np.clip(rng.normal(0.5, 0.25, (c, count)), 0, 1)
            else:
                out[:, region] = np.clip(out[:, region] + rng.normal(0, self.noise_std, (c, count)), 0, 1)
        return out


# ---------------------------------------------------------------- helpers

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``(C, H, W)`` with half-pixel centres and edge clamping."""
    c, h, w = image.shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def grid_cells(h: int, w: int, grid_h: int, grid_w: int):
    """Row and column bounds of a ``grid_h x grid_w`` tiling; last cells may be smaller."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dimensions must be >= 1")
    ch, cw = math.ceil(h / grid_h), math.ceil(w / grid_w)
    rows = [(i * ch, min((i + 1) * ch, h)) for i in range(grid_h)]
    cols = [(j * cw, min((j + 1) * cw, w)) for j in range(grid_w)]
    if any(b <= a for a, b in rows + cols):
        raise ValueError(f"a {grid_h}x{grid_w} grid leaves cells under one pixel on a {h}x{w} image")
    return rows, cols


def _check_segmap(image, segmap):
    if segmap.labels.shape != image.shape[1:]:
        raise ValueError(f"segment map {segmap.labels.shape} does not match image {image.shape[1:]}")


def _paint(segmap: SegmentMap, values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)[segmap.labels]


# ---------------------------------------------------------------- methods

def cropping_map(est: CompetencyEstimator, image: np.ndarray, grid_h: int = 8, grid_w: int = 8,
                 margin: int | None = None) -> DependencyMap:
    """Score an enlarged crop around every grid cell; dependency is ``1 - C``.

    ``margin`` pixels are added on every side of the cell (clamped to the
    image); by default half the cell size. Crops are resized to the model
    input size before scoring.
    """
    t0 = time.perf_counter()
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    rows, cols = grid_cells(h, w, grid_h, grid_w)
    mh = int(round(0.5 * (rows[0][1] - rows[0][0]))) if margin is None else int(margin)
    mw = int(round(0.5 * (cols[0][1] - cols[0][0]))) if margin is None else int(margin)
    in_h, in_w = est.model.input_shape[1:]
    raw = np.zeros((h, w))
    calls = 0
    for r0, r1 in rows:
        for c0, c1 in cols:
            crop = image[:, max(r0 - mh, 0):min(r1 + mh, h), max(c0 - mw, 0):min(c1 + mw, w)]
            score = competency_score(est, resize_bilinear(crop, in_h, in_w))
            calls += 1
            raw[r0:r1, c0:c1] = 1.0 - score
    return DependencyMap(raw, "cropping", time.perf_counter() - t0, None,
                         {"grid": [grid_h, grid_w], "margin": [mh, mw], "calls": calls, "threads": 1})


def masking_map(est: CompetencyEstimator, image: np.ndarray, segmap: SegmentMap,
                fill: FillStrategy = FillStrategy()) -> DependencyMap:
    """Keep one segment, fill everything else, score; dependency is ``1 - C_i``."""
    t0 = time.perf_counter()
    image = np.asarray(image, dtype=np.float64)
    _check_segmap(image, segmap)
    scores = np.empty(segmap.n_segments)
    for i in range(segmap.n_segments):
        scores[i] = competency_score(est, fill.apply(image, segmap.labels != i, key=i))
    return DependencyMap(_paint(segmap, 1.0 - scores), "masking", time.perf_counter() - t0, segmap,
                         {"fill": fill.kind, "calls": segmap.n_segments, "threads": 1})


def perturbation_map(est: CompetencyEstimator, image: np.ndarray, segmap: SegmentMap,
                     fill: FillStrategy = FillStrategy()) -> DependencyMap:
    """Fill one segment, score; dependency is the competency gain ``max(0, C_i - C)``."""
    t0 = time.perf_counter()
    image = np.asarray(image, dtype=np.float64)
    _check_segmap(image, segmap)
    base = competency_score(est, image)
    gains = np.empty(segmap.n_segments)
    for i in range(segmap.n_segments):
        gains[i] = max(0.0, competency_score(est, fill.apply(image, segmap.labels == i, key=i)) - base)
    return DependencyMap(_paint(segmap, gains), "perturbation", time.perf_counter() - t0, segmap,
                         {"fill": fill.kind, "calls": segmap.n_segments + 1, "base_score": base,
                          "threads": 1})


def segment_means(values: np.ndarray, segmap: SegmentMap) -> np.ndarray:
    """Mean of ``values`` (``(C, H, W)`` or ``(H, W)``) over each segment's pixels and channels."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    per_pixel = values.sum(axis=0).ravel()
    sums = np.bincount(segmap.labels.ravel(), weights=per_pixel, minlength=segmap.n_segments)
    counts = np.bincount(segmap.labels.ravel(), minlength=segmap.n_segments) * values.shape[0]
    return sums / counts


def gradient_map(est: CompetencyEstimator, image: np.ndarray, segmap: SegmentMap) -> DependencyMap:
    """Mean absolute competency gradient over each segment."""
    t0 = time.perf_counter()
    image = np.asarray(image, dtype=np.float64)
    _check_segmap(image, segmap)
    grad = competency_gradient(est, image)
    means = segment_means(np.abs(grad), segmap)
    return DependencyMap(_paint(segmap, means), "gradients", time.perf_counter() - t0, segmap,
                         {"calls": 1, "threads": 1})


def reconstruction_map(decoder: InpainterDecoder, model: PerceptionModel, image: np.ndarray,
                       segmap: SegmentMap) -> DependencyMap:
    """Mask each segment with ones, reconstruct, and take the MSE over that segment."""
    t0 = time.perf_counter()
    image = np.asarray(image, dtype=np.float64)
    _check_segmap(image, segmap)
    if decoder.model_digest != model.digest():
        raise ValueError("decoder was trained against a different perception model")
    masked = np.array([mask_with_ones(image, segmap.labels == i) for i in range(segmap.n_segments)])
    recon = decoder.decode(extract_features(model, masked))
    sq = ((recon - image[None]) ** 2).sum(axis=1)          # (S, H, W), summed over channels
    flat = segmap.labels.ravel()
    own = sq.reshape(segmap.n_segments, -1)[flat, np.arange(flat.size)]
    counts = np.bincount(flat, minlength=segmap.n_segments) * image.shape[0]
    mse = np.bincount(flat, weights=own, minlength=segmap.n_segments) / counts
    return DependencyMap(_paint(segmap, mse), "reconstruction", time.perf_counter() - t0, segmap,
                         {"calls": segmap.n_segments, "threads": 1})


def combine_maps(a: DependencyMap, b: DependencyMap) -> DependencyMap:
    """Average of two normalised maps, renormalised."""
    t0 = time.perf_counter()
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    raw = 0.5 * (a.normalized + b.normalized)
    return DependencyMap(raw, "combined", a.seconds + b.seconds + (time.perf_counter() - t0), None,
                         {"of": [a.method, b.method], "threads": 1})
