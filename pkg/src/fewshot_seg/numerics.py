"""Similarity, pooling, loss and gradient-check primitives.

Arrays are plain numpy ``ndarray`` objects. Reductions accumulate in float64
and results are returned in the input's floating dtype (float32 in
production, float64 inside gradient checks).
"""

from __future__ import annotations

import numpy as np

from .validation import (
    ConfigError,
    DimensionError,
    EmptyRegionError,
    LabelError,
    check_feature_map,
)

NORM_EPS = 1e-12
BCE_CLAMP = 1e-7


def _out_dtype(*arrays):
    dt = np.result_type(*[np.asarray(a).dtype for a in arrays])
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors; 0 when either norm vanishes."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise DimensionError("vectors must be non-empty")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_to_prototype(pixels, proto):
    """Cosine similarity of every row of ``pixels`` (N, C) with ``proto`` (C,).

    Returns ``(cos, backward)`` where ``backward(dcos)`` yields the gradients
    with respect to ``pixels`` and ``proto``.
    """
    pixels = np.asarray(pixels)
    proto = np.asarray(proto)
    if pixels.shape[-1] != proto.shape[-1]:
        raise DimensionError(f"channel mismatch: {pixels.shape[-1]} vs {proto.shape[-1]}")
    dt = _out_dtype(pixels, proto)
    x = pixels.astype(np.float64)
    p = proto.astype(np.float64)
    nx = np.sqrt((x * x).sum(axis=1))
    np_ = float(np.sqrt(p @ p))
    valid = (nx >= NORM_EPS) & (np_ >= NORM_EPS)
    denom = np.where(valid, nx * max(np_, NORM_EPS), 1.0)
    cos = np.where(valid, (x @ p) / denom, 0.0)

    def backward(dcos):
        dcos = np.where(valid, np.asarray(dcos, dtype=np.float64), 0.0)
        inv = np.where(valid, 1.0 / denom, 0.0)
        nx2 = np.where(valid, nx * nx, 1.0)
        dx = (dcos * inv)[:, None] * p[None, :] - (dcos * cos / nx2)[:, None] * x
        if np_ >= NORM_EPS:
            dp = (dcos * inv) @ x - (dcos @ cos) / (np_ * np_) * p
        else:
            dp = np.zeros_like(p)
        return dx.astype(dt), dp.astype(dt)

    return cos.astype(dt), backward


def mask_average_pool(features, mask, region_id=1):
    """Channel-wise mean of ``features`` (C, H, W) over pixels where ``mask == region_id``.

    Boolean masks are accepted; ``region_id`` then defaults to ``True``.
    """
    features = check_feature_map(features)
    mask = np.asarray(mask)
    if mask.shape != features.shape[1:]:
        raise DimensionError(f"mask shape {mask.shape} does not match features {features.shape[1:]}")
    if mask.dtype == bool and region_id in (0, 1):
        sel = mask if region_id else ~mask
    else:
        sel = mask == region_id
    count = int(sel.sum())
    if count == 0:
        raise EmptyRegionError(f"region {region_id} has no pixels")
    pooled = features[:, sel].sum(axis=1, dtype=np.float64) / count
    return pooled.astype(features.dtype)


def softmax(logits, temperature=1.0, axis=-1):
    """Numerically stable softmax of ``logits / temperature``."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("logits must be non-empty")
    z = z / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return out.astype(_out_dtype(logits))


def cross_entropy_loss(logits, labels):
    """Mean categorical cross-entropy over the N columns of ``logits`` (K, N).

    Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (K, N), got {logits.shape}")
    K, N = logits.shape
    if labels.shape != (N,):
        raise DimensionError(f"labels must have length {N}, got shape {labels.shape}")
    if N and (labels.min() < 0 or labels.max() >= K):
        raise LabelError(f"labels must lie in [0, {K})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    cols = np.arange(N)
    loss = float(np.mean(lse - z[labels, cols])) if N else 0.0
    grad = np.exp(z - lse)
    grad[labels, cols] -= 1.0
    grad /= max(N, 1)
    return loss, grad.astype(_out_dtype(logits))


def binary_cross_entropy(scores, labels):
    """Mean binary cross-entropy of sigmoid outputs against {0, 1} labels.

    Scores are clamped into ``[1e-7, 1 - 1e-7]`` before the log. Returns
    ``(loss, grad_scores)``.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DimensionError(f"length mismatch: {scores.shape} vs {labels.shape}")
    s = np.clip(scores.astype(np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = labels.astype(np.float64)
    n = max(s.size, 1)
    loss = float(-np.mean(y * np.log(s) + (1.0 - y) * np.log1p(-s))) if s.size else 0.0
    grad = (s - y) / (s * (1.0 - s)) / n
    return loss, grad.astype(_out_dtype(scores))


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=_out_dtype(x))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def finite_difference_check(fn, params, eps=1e-3, max_coords=None, seed=0):
    """Compare analytic gradients against central finite differences.

    ``fn(params)`` must return ``(loss, grads)`` where ``grads`` mirrors
    ``params`` (an ndarray or a list of ndarrays). Parameters are perturbed
    in place and restored. When ``max_coords`` is set, a seeded random subset
    of coordinates per array is checked.

    Returns the maximum of ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    single = isinstance(params, np.ndarray)
    arrays = [params] if single else list(params)
    _, grads = fn(params)
    grads = [grads] if single else list(grads)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp, _ = fn(params)
            flat[i] = orig - eps
            fm, _ = fn(params)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(float(gflat[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
