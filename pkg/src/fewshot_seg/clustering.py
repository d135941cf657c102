"""Region descriptors, spherical k-means and the coarse-to-fine prototype hierarchy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .io import read_ftns, read_json, write_ftns, write_json
from .validation import (
    ConfigError,
    DimensionError,
    NotFittedError,
    check_feature_map,
    downsample_labels,
    downsample_mask,
)

log = logging.getLogger(__name__)


@dataclass
class RegionDescriptor:
    vector: np.ndarray
    image_id: str
    region_id: int
    is_foreground: bool
    pixel_count: int


@dataclass
class RegionCorpus:
    fg: list = field(default_factory=list)
    bg: list = field(default_factory=list)
    skipped: int = 0

    def extend(self, other):
        self.fg.extend(other.fg)
        self.bg.extend(other.bg)
        self.skipped += other.skipped
        return self

    def matrix(self, side):
        items = self.fg if side == "fg" else self.bg
        if not items:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([d.vector for d in items])


def l2_normalize(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(n, 1e-12)


def extract_region_descriptors(features, regions, fg_masks=(), image_id=""):
    """Pool one unit-norm descriptor per background region and per annotated mask.

    ``regions`` is a background-restricted ``RegionMap`` at image resolution;
    its labels are nearest-neighbour downsampled to the feature grid.
    ``fg_masks`` is a sequence of binary class masks at image resolution.
    """
    features = check_feature_map(features)
    C, h, w = features.shape
    corpus = RegionCorpus()
    labels = downsample_labels(regions.labels, (h, w)).ravel()
    flat = features.reshape(C, -1).astype(np.float64)
    valid = labels >= 0
    counts = np.bincount(labels[valid], minlength=regions.num_regions)
    sums = np.zeros((regions.num_regions, C))
    np.add.at(sums, labels[valid], flat[:, valid].T)
    for r in range(regions.num_regions):
        if counts[r] == 0:
            corpus.skipped += 1
            continue
        vec = l2_normalize(sums[r] / counts[r]).astype(np.float32)
        corpus.bg.append(RegionDescriptor(vec, image_id, r, False, int(counts[r])))
    for m_idx, mask in enumerate(fg_masks):
        small = downsample_mask(mask, (h, w))
        n = int(small.sum())
        if n == 0:
            corpus.skipped += 1
            continue
        vec = l2_normalize(flat[:, small.ravel()].mean(axis=1)).astype(np.float32)
        corpus.fg.append(RegionDescriptor(vec, image_id, m_idx, True, n))
    if corpus.skipped:
        log.debug("%s: skipped %d regions with no aligned feature cells", image_id, corpus.skipped)
    return corpus


def _sq_distances(X, centers):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, K, rng):
    """Greedy k-means++: each step draws a few D^2-weighted candidates and keeps the best."""
    n = X.shape[0]
    trials = 2 + int(np.log(K))
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_distances(X, centers[:1])[:, 0]
    for i in range(1, K):
        total = closest.sum()
        if total <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = np.searchsorted(np.cumsum(closest), rng.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
        cand_d = np.minimum(closest[None, :], _sq_distances(X, X[cand]).T)
        best = int(np.argmin(cand_d.sum(axis=1)))
        centers[i] = X[cand[best]]
        closest = cand_d[best]
    return centers


def _project(centers):
    """Project centers onto the unit sphere (zero vectors stay put)."""
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    return np.where(norms > 1e-12, centers / np.maximum(norms, 1e-12), centers)


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list
    n_iter: int


def kmeans(points, K, max_iters=100, tol=1e-6, seed=0):
    """Lloyd's algorithm on the unit sphere with k-means++ seeding.

    Centers are projected to unit length after every update, so the inertia
    (sum of squared Euclidean distances to the assigned unit centers) is
    non-increasing and the final assignment is nearest-center optimal.
    Empty clusters are reseeded to the point farthest from its center.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"points must be (N, C), got {X.shape}")
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ConfigError(f"K={K} must lie in [1, {n}] (number of points); use a smaller K")
    rng = np.random.default_rng(seed)
    centers = _project(_kmeans_pp(X, K, rng))
    history = []
    it = 0
    while True:
        d = _sq_distances(X, centers)
        assign = d.argmin(axis=1)
        dist = d[np.arange(n), assign]
        history.append(float(dist.sum()))
        if it >= max_iters:
            break
        it += 1
        new = np.zeros_like(centers)
        np.add.at(new, assign, X)
        counts = np.bincount(assign, minlength=K)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            far = np.argsort(-dist, kind="stable")
            taken = set()
            pos = 0
            for c in empty:
                while int(far[pos]) in taken:
                    pos += 1
                taken.add(int(far[pos]))
                new[c] = X[far[pos]]
                counts[c] = 1
        new = _project(new / counts[:, None])
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift <= tol:
            d = _sq_distances(X, centers)
            assign = d.argmin(axis=1)
            history.append(float(d[np.arange(n), assign].sum()))
            break
    return KMeansResult(centers.astype(np.float32), assign, history[-1], history, it)


class SphericalKMeans(BaseEstimator, ClusterMixin):
    def __init__(self, n_clusters=8, max_iter=100, tol=1e-6, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        res = kmeans(X, self.n_clusters, self.max_iter, self.tol, self.random_state)
        self.cluster_centers_ = res.centers
        self.labels_ = res.assignments
        self.inertia_ = res.inertia
        self.inertia_history_ = res.inertia_history
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X):
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("SphericalKMeans is not fitted")
        return _sq_distances(np.asarray(X, dtype=np.float64), self.cluster_centers_.astype(np.float64)).argmin(axis=1)


# (fg, bg) cluster counts per level, finest first.
DESK_LEVEL_SIZES = ((8, 12), (4, 6), (2, 3))
PASCAL_LEVEL_SIZES = ((50, 50), (25, 25), (15, 15))
COCO_LEVEL_SIZES = ((75, 75), (50, 50), (25, 25))


@dataclass
class ClusterConfig:
    level_sizes: tuple = DESK_LEVEL_SIZES
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        sizes = []
        for s in self.level_sizes:
            fg, bg = (s, s) if np.isscalar(s) else s
            if fg < 1 or bg < 1:
                raise ConfigError("every cluster count must be >= 1")
            sizes.append((int(fg), int(bg)))
        if not sizes:
            raise ConfigError("at least one level is required")
        for prev, cur in zip(sizes, sizes[1:]):
            if not (cur[0] < prev[0] and cur[1] < prev[1]):
                raise ConfigError(f"level sizes must strictly decrease, got {sizes}")
        self.level_sizes = tuple(sizes)


@dataclass
class PrototypeHierarchy:
    levels: list  # [(fg (K_fg, C), bg (K_bg, C))], finest first

    @property
    def level_sizes(self):
        return [(fg.shape[0], bg.shape[0]) for fg, bg in self.levels]

    @property
    def channels(self):
        return self.levels[0][0].shape[1]

    def save(self, directory, seed=0, encoder_hash=""):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for l, (fg, bg) in enumerate(self.levels):
            write_ftns(directory / f"level{l}_fg.ftns", fg)
            write_ftns(directory / f"level{l}_bg.ftns", bg)
        write_json(directory / "manifest.json", {
            "levels": len(self.levels),
            "sizes": [list(s) for s in self.level_sizes],
            "seed": seed,
            "encoder_checkpoint_hash": encoder_hash,
        })

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        levels = [(read_ftns(directory / f"level{l}_fg.ftns"), read_ftns(directory / f"level{l}_bg.ftns"))
                  for l in range(manifest["levels"])]
        return cls(levels)


def build_hierarchy(corpus, config=None):
    """Cluster fg and bg descriptors separately, then re-cluster each level's centers."""
    config = config or ClusterConfig()
    sides = {}
    for side in ("fg", "bg"):
        X = corpus.matrix(side)
        k1 = config.level_sizes[0][0 if side == "fg" else 1]
        if X.shape[0] < k1:
            raise ConfigError(f"{side} corpus has {X.shape[0]} descriptors but level 1 needs K={k1}; use a smaller K")
        centers_per_level = []
        for l, sizes in enumerate(config.level_sizes):
            K = sizes[0 if side == "fg" else 1]
            res = kmeans(X, K, config.max_iters, config.tol, config.seed + l)
            centers_per_level.append(res.centers)
            X = res.centers
        sides[side] = centers_per_level
    return PrototypeHierarchy([(fg, bg) for fg, bg in zip(sides["fg"], sides["bg"])])


class HierarchicalPrototypes(BaseEstimator):
    """Fit a prototype hierarchy on a region corpus; ``predict`` assigns pseudo labels."""

    def __init__(self, level_sizes=DESK_LEVEL_SIZES, max_iter=100, tol=1e-6, random_state=0):
        self.level_sizes = level_sizes
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, corpus, y=None):
        cfg = ClusterConfig(self.level_sizes, self.max_iter, self.tol, self.random_state)
        self.hierarchy_ = build_hierarchy(corpus, cfg)
        return self

    def predict(self, features, fg_mask):
        from .pseudo_labels import assign_pseudo_labels

        if not hasattr(self, "hierarchy_"):
            raise NotFittedError("HierarchicalPrototypes is not fitted")
        return assign_pseudo_labels(features, fg_mask, self.hierarchy_)
