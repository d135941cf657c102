"""Per-episode online foreground/background classifier with query self-refinement.

A rough prototype-matching pass scores the query; confidently scored query
cells join the support cells as training samples for a small MLP that then
labels every query cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .layers import Dropout, Linear, ReLU, bilinear_resize
from .numerics import binary_cross_entropy, sigmoid, softmax
from .training import DEFAULT_TEMPERATURE, compute_mask_prototypes, paired_similarity
from .validation import (
    ConfigError,
    MissingForegroundError,
    NotFittedError,
    check_feature_map,
    check_unit_interval,
    downsample_mask,
)

MODES = ("matching", "srofb_support_only", "srofb_self_refined")
CLI_MODES = {"matching": "matching", "srofb": "srofb_support_only", "srofb-self": "srofb_self_refined"}


class DegenerateSampleError(ValueError):
    """The sample set lacks positives or negatives."""


@dataclass
class RefineConfig:
    tau_fg: float = 0.7
    tau_bg: float = 0.6
    learning_rate: float = 0.1
    iterations_1shot: int = 10
    iterations_kshot: int = 100
    max_pixels_per_class: int = 1024
    temperature: float = DEFAULT_TEMPERATURE
    hidden_size: int = 128
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        check_unit_interval(self.tau_fg, "tau_fg")
        check_unit_interval(self.tau_bg, "tau_bg")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.iterations_1shot < 0 or self.iterations_kshot < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.max_pixels_per_class < 1:
            raise ConfigError("max_pixels_per_class must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")

    def iterations(self, k_shot):
        return self.iterations_1shot if k_shot <= 1 else self.iterations_kshot


@dataclass
class PixelSampleSet:
    positives: np.ndarray
    negatives: np.ndarray
    pos_origin: list = field(default_factory=list)
    neg_origin: list = field(default_factory=list)

    @classmethod
    def empty(cls, channels):
        z = np.zeros((0, channels), dtype=np.float32)
        return cls(z, z.copy(), [], [])

    def __add__(self, other):
        return PixelSampleSet(
            np.concatenate([self.positives, other.positives]),
            np.concatenate([self.negatives, other.negatives]),
            self.pos_origin + other.pos_origin,
            self.neg_origin + other.neg_origin,
        )

    def to_xy(self):
        X = np.concatenate([self.positives, self.negatives]).astype(np.float32)
        y = np.concatenate([np.ones(len(self.positives)), np.zeros(len(self.negatives))]).astype(np.int64)
        return X, y


def rough_segment(query_features, protos, temperature=DEFAULT_TEMPERATURE):
    """Matching scores (2, h, w): channel 0 background, channel 1 foreground."""
    s = paired_similarity(check_feature_map(query_features), protos)
    return softmax(s, temperature=temperature, axis=0)


def select_confident_pixels(score_map, query_features, config):
    """Query cells with fg score > tau_fg become positives, bg score > tau_bg negatives.

    Each side keeps at most ``max_pixels_per_class`` cells, highest score first
    (ties by raster order).
    """
    feats = check_feature_map(query_features)
    C = feats.shape[0]
    flat = feats.reshape(C, -1).T
    bg_score = np.asarray(score_map[0]).ravel()
    fg_score = np.asarray(score_map[1]).ravel()
    out = []
    for score, tau in ((fg_score, config.tau_fg), (bg_score, config.tau_bg)):
        idx = np.flatnonzero(score > tau)
        idx = idx[np.argsort(-score[idx], kind="stable")][: config.max_pixels_per_class]
        out.append(idx)
    pos_idx, neg_idx = out
    return PixelSampleSet(flat[pos_idx].astype(np.float32), flat[neg_idx].astype(np.float32),
                          ["query"] * len(pos_idx), ["query"] * len(neg_idx))


def gather_support_pixels(support_features, support_masks, max_pixels_per_class=1024, seed=0):
    """All support fg cells as positives and bg cells as negatives, seeded subsample per side."""
    feats = [check_feature_map(f) for f in (support_features if isinstance(support_features, (list, tuple))
                                            else [support_features])]
    masks = support_masks if isinstance(support_masks, (list, tuple)) else [support_masks]
    C = feats[0].shape[0]
    pos, neg = [], []
    for f, m in zip(feats, masks):
        small = downsample_mask(m, f.shape[1:]).ravel()
        flat = f.reshape(C, -1).T
        pos.append(flat[small])
        neg.append(flat[~small])
    pos = np.concatenate(pos)
    neg = np.concatenate(neg)
    if len(pos) == 0:
        raise MissingForegroundError("no support contains a foreground cell")
    rng = np.random.default_rng(seed)
    if len(pos) > max_pixels_per_class:
        pos = pos[np.sort(rng.choice(len(pos), max_pixels_per_class, replace=False))]
    if len(neg) > max_pixels_per_class:
        neg = neg[np.sort(rng.choice(len(neg), max_pixels_per_class, replace=False))]
    return PixelSampleSet(pos.astype(np.float32), neg.astype(np.float32),
                          ["support"] * len(pos), ["support"] * len(neg))


class OFBClassifier(BaseEstimator, ClassifierMixin):
    """Two-layer perceptron (linear, ReLU, dropout, linear, sigmoid) trained with BCE.

    ``fit`` runs ``n_iter`` full-batch SGD steps on class-balanced draws.
    """

    def __init__(self, hidden_size=128, dropout=0.1, learning_rate=0.1, n_iter=10, random_state=0):
        self.hidden_size = hidden_size
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.random_state = random_state

    def _init(self, n_features):
        rng = np.random.default_rng(self.random_state)
        self.fc1_ = Linear(n_features, self.hidden_size, rng=rng)
        self.relu_ = ReLU()
        self.drop_ = Dropout(self.dropout, rng=rng)
        self.fc2_ = Linear(self.hidden_size, 1, rng=rng)
        self.layers_ = [self.fc1_, self.relu_, self.drop_, self.fc2_]
        self.init_params_ = [{k: v.copy() for k, v in l.params.items()} for l in (self.fc1_, self.fc2_)]

    def _forward(self, X, train):
        h = X
        for layer in self.layers_:
            h = layer.forward(h, train=train)
        return h[:, 0]

    def _backward(self, dlogit):
        g = dlogit[:, None]
        for layer in reversed(self.layers_):
            g = layer.backward(g)
        return g

    def loss(self, X, y, train=False):
        """BCE of the current classifier on ``(X, y)`` and its logit gradient."""
        scores = sigmoid(self._forward(np.asarray(X, dtype=np.float32), train))
        loss, dscore = binary_cross_entropy(scores, y)
        return loss, dscore * scores * (1.0 - scores)

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y).astype(np.int64)
        pos = np.flatnonzero(y == 1)
        neg = np.flatnonzero(y == 0)
        if len(pos) == 0 or len(neg) == 0:
            raise DegenerateSampleError(f"need both classes, got {len(pos)} positives and {len(neg)} negatives")
        self.classes_ = np.array([0, 1])
        self._init(X.shape[1])
        rng = np.random.default_rng([self.random_state, 1])
        m = min(len(pos), len(neg))
        self.loss_history_ = []
        for _ in range(self.n_iter):
            batch = np.concatenate([
                pos if len(pos) == m else rng.choice(pos, m, replace=False),
                neg if len(neg) == m else rng.choice(neg, m, replace=False),
            ])
            for layer in (self.fc1_, self.fc2_):
                layer.zero_grad()
            scores = sigmoid(self._forward(X[batch], train=True))
            loss, dscore = binary_cross_entropy(scores, y[batch])
            self.loss_history_.append(loss)
            self._backward((dscore * scores * (1.0 - scores)).astype(np.float32))
            for layer in (self.fc1_, self.fc2_):
                for k, w in layer.params.items():
                    w -= np.float32(self.learning_rate) * layer.grads[k]
        return self

    def _check(self):
        if not hasattr(self, "layers_"):
            raise NotFittedError("OFBClassifier is not fitted")

    def decision_function(self, X):
        self._check()
        return self._forward(np.asarray(X, dtype=np.float32), train=False)

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        # a score of exactly 0.5 is background
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)


def _classifier_from(config, k_shot):
    return OFBClassifier(config.hidden_size, config.dropout, config.learning_rate,
                         config.iterations(k_shot), config.seed)


def refine_classifier(samples, config, k_shot=1):
    """Train a fresh classifier on ``samples``; raises ``DegenerateSampleError`` on an empty side."""
    X, y = samples.to_xy()
    return _classifier_from(config, k_shot).fit(X, y)


def score_map_to_mask(fg_scores, image_size):
    """Bilinearly upsample a (h, w) fg-probability map, then threshold strictly above 0.5."""
    up = bilinear_resize(np.asarray(fg_scores, dtype=np.float64), image_size)
    return up > 0.5


def predict_mask(classifier, query_features, image_size):
    feats = check_feature_map(query_features)
    C, h, w = feats.shape
    p = classifier.predict_proba(feats.reshape(C, -1).T)[:, 1].reshape(h, w)
    return score_map_to_mask(p, image_size)


def segment_features(query_features, support_features, support_masks, image_size, mode, config):
    """Segment one query from encoded features; the core of ``segment_episode``."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    k_shot = len(support_features)
    protos = compute_mask_prototypes(support_features, support_masks)
    scores = rough_segment(query_features, protos, config.temperature)
    if mode == "matching":
        return score_map_to_mask(scores[1], image_size)
    samples = gather_support_pixels(support_features, support_masks, config.max_pixels_per_class, config.seed)
    if mode == "srofb_self_refined":
        harvested = select_confident_pixels(scores, query_features, config)
        try:
            return predict_mask(refine_classifier(samples + harvested, config, k_shot), query_features, image_size)
        except DegenerateSampleError:
            pass
    try:
        return predict_mask(refine_classifier(samples, config, k_shot), query_features, image_size)
    except DegenerateSampleError:
        return score_map_to_mask(scores[1], image_size)


def segment_episode(episode, encoder, config=None, mode="srofb_self_refined"):
    """Encode supports and query with the frozen encoder and predict the query mask."""
    config = config or RefineConfig()
    feats = encoder.encode(np.stack(list(episode.support_images) + [episode.query_image]))
    image_size = episode.query_image.shape[:2]
    return segment_features(feats[-1], list(feats[:-1]), list(episode.support_masks), image_size, mode, config)


class FewShotSegmenter(BaseEstimator):
    """``fit`` on annotated supports, ``predict`` query masks (self-refinement happens per query)."""

    def __init__(self, encoder=None, mode="srofb_self_refined", tau_fg=0.7, tau_bg=0.6, learning_rate=0.1,
                 iterations_1shot=10, iterations_kshot=100, max_pixels_per_class=1024,
                 temperature=DEFAULT_TEMPERATURE, hidden_size=128, dropout=0.1, random_state=0):
        self.encoder = encoder
        self.mode = mode
        self.tau_fg = tau_fg
        self.tau_bg = tau_bg
        self.learning_rate = learning_rate
        self.iterations_1shot = iterations_1shot
        self.iterations_kshot = iterations_kshot
        self.max_pixels_per_class = max_pixels_per_class
        self.temperature = temperature
        self.hidden_size = hidden_size
        self.dropout = dropout
        self.random_state = random_state

    def refine_config(self):
        return RefineConfig(self.tau_fg, self.tau_bg, self.learning_rate, self.iterations_1shot,
                            self.iterations_kshot, self.max_pixels_per_class, self.temperature,
                            self.hidden_size, self.dropout, self.random_state)

    def fit(self, support_images, support_masks):
        if self.encoder is None:
            raise ConfigError("an encoder is required")
        self.support_features_ = list(self.encoder.encode(np.stack(support_images)))
        self.support_masks_ = [np.asarray(m, dtype=bool) for m in support_masks]
        if not any(m.any() for m in self.support_masks_):
            raise MissingForegroundError("no support contains a foreground pixel")
        return self

    def predict(self, query_images):
        if not hasattr(self, "support_features_"):
            raise NotFittedError("FewShotSegmenter is not fitted")
        single = np.asarray(query_images).ndim == 3
        images = np.asarray(query_images)[None] if single else np.asarray(query_images)
        feats = self.encoder.encode(images)
        cfg = self.refine_config()
        masks = [segment_features(f, self.support_features_, self.support_masks_, img.shape[:2], self.mode, cfg)
                 for f, img in zip(feats, images)]
        return masks[0] if single else np.stack(masks)
