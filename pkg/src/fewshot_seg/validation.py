"""Input validation helpers shared by the estimators and pipeline stages."""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Array shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class LabelError(ValueError):
    """A class label lies outside the valid label range."""


class DataError(ValueError):
    """The dataset cannot satisfy a request (too few images, missing labels)."""


class EmptyRegionError(ValueError):
    """Pooling was requested over a region that has no pixels."""


class MissingForegroundError(ValueError):
    """A support mask carries no foreground pixel."""


class NotFittedError(RuntimeError):
    """An estimator was used before ``fit``."""


def check_feature_map(features, name="features"):
    features = np.asarray(features)
    if features.ndim != 3:
        raise DimensionError(f"{name} must be (C, H, W), got shape {features.shape}")
    if not np.issubdtype(features.dtype, np.floating):
        features = features.astype(np.float32)
    return features


def check_image(image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got shape {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image pixel values must lie in [0, 1]")
    return image


def check_mask(mask, shape=None, name="mask"):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise DimensionError(f"{name} shape {mask.shape} does not match {tuple(shape)}")
    return mask.astype(bool)


def check_same_length(a, b):
    if len(a) != len(b):
        raise DimensionError(f"length mismatch: {len(a)} vs {len(b)}")


def check_positive(value, name):
    if not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value}")
    return value


def check_unit_interval(value, name, closed=False):
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        raise ConfigError(f"{name} must lie in {'[0, 1]' if closed else '(0, 1)'}, got {value}")
    return value


def downsample_mask(mask, out_shape):
    """Majority-vote downsampling of a binary mask; ties go to background."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    h, w = out_shape
    if (H, W) == (h, w):
        return mask.copy()
    if H % h == 0 and W % w == 0:
        fh, fw = H // h, W // w
        votes = mask.reshape(h, fh, w, fw).sum(axis=(1, 3))
        return votes * 2 > fh * fw
    # non-integer factor: vote over the nearest source block
    rows = np.minimum((np.arange(h + 1) * H) // h, H)
    cols = np.minimum((np.arange(w + 1) * W) // w, W)
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            block = mask[rows[i]:max(rows[i + 1], rows[i] + 1), cols[j]:max(cols[j + 1], cols[j] + 1)]
            out[i, j] = block.sum() * 2 > block.size
    return out


def downsample_labels(labels, out_shape):
    """Nearest-neighbour downsampling of an integer label map."""
    labels = np.asarray(labels)
    H, W = labels.shape
    h, w = out_shape
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return labels[np.ix_(rows, cols)]


def upsample_labels(labels, out_shape):
    """Nearest-neighbour upsampling of an integer label map (block replication)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    H, W = out_shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return labels[np.ix_(rows, cols)]
