"""Felzenszwalb-Huttenlocher graph segmentation on the pixel grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

__all__ = ["FelzParams", "SegmentMap", "gaussian_smooth", "grid_edges",
           "felzenszwalb_segment", "segment_mask"]

# (dy, dx) per direction index; 4-connectivity uses the first two
_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


@dataclass(frozen=True)
class FelzParams:
    k: float = 1.0
    sigma: float = 0.8
    min_size: int = 20
    connectivity: int = 8

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.min_size < 1:
            raise ValueError("min_size must be at least 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class SegmentMap:
    labels: np.ndarray
    n_segments: int

    @property
    def shape(self):
        return self.labels.shape

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)


def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a ``(C, H, W)`` image with mirrored borders.

    The kernel has radius ``ceil(3 * sigma)`` and is normalised to unit sum.
    """
    image = np.asarray(image, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return image.copy()
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    out = convolve1d(image, kernel, axis=-1, mode="reflect")
    return convolve1d(out, kernel, axis=-2, mode="reflect")


def grid_edges(image: np.ndarray, connectivity: int = 8):
    """Edge list of the pixel grid graph, sorted for processing.

    Returns ``(src, dst, weight)`` arrays ordered by weight, then source
    raster index, then direction index. Weights are Euclidean distances
    between the channel vectors of the two pixels.
    """
    c, h, w = image.shape
    idx = np.arange(h * w).reshape(h, w)
    srcs, dsts, wts, dirs = [], [], [], []
    for d, (dy, dx) in enumerate(_OFFSETS[: 2 if connectivity == 4 else 4]):
        ys = slice(0, h - dy)
        xs = slice(max(0, -dx), w - max(0, dx))
        yd = slice(dy, h)
        xd = slice(max(0, dx), w - max(0, -dx) if dx < 0 else w)
        s = idx[ys, xs].ravel()
        t = idx[yd, xd].ravel()
        diff = image[:, ys, xs] - image[:, yd, xd]
        srcs.append(s)
        dsts.append(t)
        wts.append(np.sqrt((diff ** 2).sum(axis=0)).ravel())
        dirs.append(np.full(s.size, d))
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    wt = np.concatenate(wts)
    di = np.concatenate(dirs)
    order = np.lexsort((di, src, wt))
    return src[order], dst[order], wt[order]


def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def felzenszwalb_segment(image: np.ndarray, params: FelzParams = FelzParams()) -> SegmentMap:
    """Segment a ``(C, H, W)`` image; returns contiguous raster-ordered labels."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if h * w == 0:
        raise ValueError("empty image")
    smooth = gaussian_smooth(image, params.sigma)
    src, dst, wt = grid_edges(smooth, params.connectivity)
    src, dst, wt = src.tolist(), dst.tolist(), wt.tolist()

    n = h * w
    parent = list(range(n))
    size = [1] * n
    thresh = [params.k] * n
    k = params.k
    for a, b, weight in zip(src, dst, wt):
        ra = _find(parent, a)
        rb = _find(parent, b)
        if ra != rb and weight <= thresh[ra] and weight <= thresh[rb]:
            if size[ra] < size[rb]:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
            thresh[ra] = weight + k / size[ra]

    min_size = params.min_size
    if min_size > 1:
        for a, b in zip(src, dst):
            ra = _find(parent, a)
            rb = _find(parent, b)
            if ra != rb and (size[ra] < min_size or size[rb] < min_size):
                if size[ra] < size[rb]:
                    ra, rb = rb, ra
                parent[rb] = ra
                size[ra] += size[rb]

    roots = np.array([_find(parent, i) for i in range(n)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    labels = rank[inverse].reshape(h, w)
    return SegmentMap(labels=labels, n_segments=int(first.size))


def segment_mask(segmap: SegmentMap, seg_id: int) -> np.ndarray:
    if not 0 <= seg_id < segmap.n_segments:
        raise IndexError(f"segment id {seg_id} outside 0..{segmap.n_segments - 1}")
    return segmap.labels == seg_id
