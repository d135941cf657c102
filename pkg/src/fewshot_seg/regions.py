"""Unsupervised region segmentation of training-image backgrounds.

Greedy graph-based merging over an 8-connected pixel graph (union-find over
edges sorted by colour distance), followed by a 4-connectivity split and a
minimum-size merge pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import ConfigError, check_image, check_mask

# scale_k per unit of contour threshold; colour distances are in 8-bit units.
CONTOUR_TO_SCALE = 300.0
FOREGROUND = -1


@dataclass
class SegConfig:
    scale_k: float = 135.0
    min_region_size: int = 12
    gaussian_sigma: float = 0.8
    contour_threshold: float = 0.45

    def __post_init__(self):
        if not self.scale_k > 0:
            raise ConfigError("scale_k must be > 0")
        if self.min_region_size < 1:
            raise ConfigError("min_region_size must be >= 1")
        if self.gaussian_sigma < 0:
            raise ConfigError("gaussian_sigma must be >= 0")
        if not 0.0 < self.contour_threshold < 1.0:
            raise ConfigError("contour_threshold must lie in (0, 1)")

    @classmethod
    def from_contour_threshold(cls, tau=0.45, **kwargs):
        return cls(scale_k=CONTOUR_TO_SCALE * tau, contour_threshold=tau, **kwargs)


@dataclass
class RegionMap:
    labels: np.ndarray
    num_regions: int

    def sizes(self):
        valid = self.labels[self.labels >= 0]
        return np.bincount(valid, minlength=self.num_regions)


class _DisjointSet:
    __slots__ = ("parent", "size", "internal")

    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x):
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a, b, weight=0.0):
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight
        return a


def _grid_edges(h, w, diagonal=True):
    idx = np.arange(h * w).reshape(h, w)
    pairs = [(idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])]
    if diagonal:
        pairs += [(idx[:-1, :-1], idx[1:, 1:]), (idx[1:, :-1], idx[:-1, 1:])]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    return a, b


def _relabel_contiguous(labels):
    """Renumber labels >= 0 to [0, n) in raster order of first appearance."""
    out = np.full(labels.shape, FOREGROUND, dtype=np.int32)
    flat = labels.ravel()
    valid = flat >= 0
    if not valid.any():
        return out, 0
    uniq, first = np.unique(flat[valid], return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(uniq.size, dtype=np.int32)
    remap[order] = np.arange(uniq.size, dtype=np.int32)
    out.ravel()[valid] = remap[np.searchsorted(uniq, flat[valid])]
    return out, int(uniq.size)


def split_connected(labels):
    """Split every label into its 4-connected components; negative labels are kept as-is."""
    h, w = labels.shape
    a, b = _grid_edges(h, w, diagonal=False)
    flat = labels.ravel()
    same = (flat[a] == flat[b]) & (flat[a] >= 0)
    n = h * w
    graph = coo_matrix((np.ones(int(same.sum())), (a[same], b[same])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    comp = np.where(flat >= 0, comp, FOREGROUND).reshape(h, w)
    return _relabel_contiguous(comp)


def segment_regions(image, config=None):
    """Partition ``image`` (H, W, 3) into appearance-coherent 4-connected regions."""
    config = config or SegConfig()
    image = check_image(image)
    h, w = image.shape[:2]
    if h * w == 1:
        return RegionMap(np.zeros((h, w), dtype=np.int32), 1)
    img = image.astype(np.float64) * 255.0
    if config.gaussian_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(config.gaussian_sigma, config.gaussian_sigma, 0), mode="nearest")
    flat = img.reshape(-1, 3)
    a, b = _grid_edges(h, w, diagonal=True)
    weight = np.sqrt(((flat[a] - flat[b]) ** 2).sum(axis=1))
    order = np.argsort(weight, kind="stable")

    k = float(config.scale_k)
    ds = _DisjointSet(h * w)
    find, size, internal = ds.find, ds.size, ds.internal
    for e, wt, ea, eb in zip(order.tolist(), weight[order].tolist(), a[order].tolist(), b[order].tolist()):
        ra, rb = find(ea), find(eb)
        if ra != rb and wt <= min(internal[ra] + k / size[ra], internal[rb] + k / size[rb]):
            ds.union(ra, rb, wt)
    roots = np.fromiter((find(i) for i in range(h * w)), dtype=np.int64, count=h * w)
    labels, _ = split_connected(roots.reshape(h, w))

    # min-size pass over 4-adjacent edges in ascending weight order
    a4, b4 = _grid_edges(h, w, diagonal=False)
    w4 = np.sqrt(((flat[a4] - flat[b4]) ** 2).sum(axis=1))
    order4 = np.argsort(w4, kind="stable")
    lab = labels.ravel()
    counts = np.bincount(lab).tolist()
    ds2 = _DisjointSet(len(counts))
    ds2.size = counts
    min_size = config.min_region_size
    for ea, eb in zip(a4[order4].tolist(), b4[order4].tolist()):
        ra, rb = ds2.find(int(lab[ea])), ds2.find(int(lab[eb]))
        if ra != rb and (ds2.size[ra] < min_size or ds2.size[rb] < min_size):
            ds2.union(ra, rb)
    merged = np.fromiter((ds2.find(i) for i in range(len(counts))), dtype=np.int64, count=len(counts))
    out, n = _relabel_contiguous(merged[labels])
    return RegionMap(out, n)


def restrict_to_background(regions, fg_mask):
    """Keep region ids on background pixels only; foreground pixels get ``FOREGROUND``.

    Regions clipped into several pieces are relabelled separately and ids are
    renumbered contiguously.
    """
    fg = check_mask(fg_mask, regions.labels.shape, "fg_mask")
    clipped = np.where(fg, FOREGROUND, regions.labels)
    labels, n = split_connected(clipped)
    return RegionMap(labels, n)


class RegionSegmenter(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``transform`` maps a list of images to region maps."""

    def __init__(self, scale_k=135.0, min_region_size=12, gaussian_sigma=0.8, contour_threshold=0.45):
        self.scale_k = scale_k
        self.min_region_size = min_region_size
        self.gaussian_sigma = gaussian_sigma
        self.contour_threshold = contour_threshold

    def _config(self):
        return SegConfig(self.scale_k, self.min_region_size, self.gaussian_sigma, self.contour_threshold)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X, fg_masks=None):
        config = self._config()
        maps = [segment_regions(img, config) for img in X]
        if fg_masks is not None:
            maps = [restrict_to_background(m, fg) for m, fg in zip(maps, fg_masks)]
        return maps
