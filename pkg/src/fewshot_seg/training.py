"""Episodic metric learning and joint training with hierarchical pseudo labels."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import color_jitter, hflip, random_resized_crop
from .models import level_decoder, tiny_encoder
from .numerics import cosine_to_prototype, cross_entropy_loss
from .optim import SGD, SgdConfig
from .validation import (
    ConfigError,
    DataError,
    DimensionError,
    LabelError,
    MissingForegroundError,
    check_feature_map,
    downsample_mask,
    upsample_labels,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.0 / 20.0


@dataclass
class MaskPrototypes:
    p_fg: np.ndarray
    p_bg: np.ndarray


@dataclass
class LossWeights:
    gamma: tuple = (0.5, 1.0, 1.0)
    seg_weight: float = 1.0

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        if not self.gamma or any(not g > 0 for g in self.gamma):
            raise ConfigError(f"every gamma must be > 0, got {self.gamma}")
        if not self.seg_weight > 0:
            raise ConfigError("seg_weight must be > 0")


@dataclass
class TrainConfig:
    pairs_per_batch: int = 4
    extra_images_per_batch: int = 16
    total_iterations: int = 6000
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    decoder_width: int = 16
    flip_pairs: bool = True
    strong_augment: bool = True

    def __post_init__(self):
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)
        if self.pairs_per_batch < 1 or self.extra_images_per_batch < 1:
            raise ConfigError("batch counts must be >= 1")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")

    def to_dict(self):
        return asdict(self)


def _as_list(x, ndim=3):
    if isinstance(x, np.ndarray) and x.ndim == ndim:
        return [x]
    return list(x)


def _masks_at(masks, shape):
    return [downsample_mask(m, shape) for m in masks]


def compute_mask_prototypes(features, masks):
    """Foreground/background mask-average-pooled prototypes.

    ``features`` is one (C, h, w) map or a list of them (k-shot); masks are
    binary at image or feature resolution. All supports' pixels are pooled
    jointly.
    """
    feats = [check_feature_map(f) for f in _as_list(features)]
    masks = _masks_at(_as_list(masks, 2), feats[0].shape[1:])
    C = feats[0].shape[0]
    fg_sum = np.zeros(C)
    bg_sum = np.zeros(C)
    n_fg = n_bg = 0
    for f, m in zip(feats, masks):
        flat = f.reshape(C, -1).astype(np.float64)
        sel = m.ravel()
        fg_sum += flat[:, sel].sum(axis=1)
        bg_sum += flat[:, ~sel].sum(axis=1)
        n_fg += int(sel.sum())
        n_bg += int((~sel).sum())
    if n_fg == 0:
        raise MissingForegroundError("support masks contain no foreground pixel")
    if n_bg == 0:
        raise MissingForegroundError("support masks contain no background pixel")
    dt = feats[0].dtype
    return MaskPrototypes((fg_sum / n_fg).astype(dt), (bg_sum / n_bg).astype(dt))


def paired_similarity(pixel_feature, protos):
    """``[cos(f, p_bg), cos(f, p_fg)]``: background first, foreground second.

    Accepts a single (C,) vector or a (C, h, w) map (returns (2, h, w)).
    """
    f = np.asarray(pixel_feature)
    if f.shape[0] != protos.p_fg.shape[0]:
        raise DimensionError(f"channel mismatch: {f.shape[0]} vs {protos.p_fg.shape[0]}")
    flat = f.reshape(f.shape[0], -1).T
    s_bg, _ = cosine_to_prototype(flat, protos.p_bg)
    s_fg, _ = cosine_to_prototype(flat, protos.p_fg)
    s = np.stack([s_bg, s_fg])
    return s[:, 0] if f.ndim == 1 else s.reshape((2,) + f.shape[1:])


def seg_loss(query_features, support_features, support_masks, gt_mask, temperature=DEFAULT_TEMPERATURE):
    """Prototype-matching segmentation loss for one episode.

    Per query cell: 2-way softmax over paired cosine similarities divided by
    ``temperature``, cross-entropy against the binary ground truth, averaged
    over cells. Returns ``(loss, grad_query, [grad_support])``; gradients flow
    through both cosine arguments and through the pooled prototypes.
    """
    q = check_feature_map(query_features)
    sups = [check_feature_map(s) for s in _as_list(support_features)]
    C, h, w = q.shape
    smasks = _masks_at(_as_list(support_masks, 2), sups[0].shape[1:])
    gt = downsample_mask(gt_mask, (h, w)).ravel()
    protos = compute_mask_prototypes(sups, smasks)

    Q = q.reshape(C, -1).T
    c_bg, back_bg = cosine_to_prototype(Q, protos.p_bg)
    c_fg, back_fg = cosine_to_prototype(Q, protos.p_fg)
    logits = np.stack([c_bg, c_fg]) / temperature
    loss, dlogits = cross_entropy_loss(logits, gt.astype(np.int64))
    dlogits = dlogits / temperature
    dq_bg, dp_bg = back_bg(dlogits[0])
    dq_fg, dp_fg = back_fg(dlogits[1])
    dq = (dq_bg + dq_fg).T.reshape(C, h, w).astype(q.dtype)

    n_fg = sum(int(m.sum()) for m in smasks)
    n_bg = sum(int((~m).sum()) for m in smasks)
    dsups = []
    for s, m in zip(sups, smasks):
        g = np.where(m[None], (dp_fg / n_fg)[:, None, None], (dp_bg / n_bg)[:, None, None])
        dsups.append(g.astype(s.dtype))
    return loss, dq, dsups


def pseudo_cls_loss(level_logits, labels, level=0):
    """Mean pixel-wise cross-entropy of (N, K, H, W) logits against (N, H, W) labels."""
    logits = np.asarray(level_logits)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits, labels = logits[None], labels[None]
    N, K, H, W = logits.shape
    if labels.shape != (N, H, W):
        raise DimensionError(f"labels {labels.shape} do not match logits {(N, H, W)}")
    if labels.size and labels.max() >= K:
        raise LabelError(f"level {level}: label {labels.max()} >= channel count {K}")
    flat = logits.transpose(1, 0, 2, 3).reshape(K, -1)
    loss, grad = cross_entropy_loss(flat, labels.reshape(-1))
    return loss, grad.reshape(K, N, H, W).transpose(1, 0, 2, 3)


def total_pseudo_loss(losses, weights):
    gamma = weights.gamma if isinstance(weights, LossWeights) else tuple(weights)
    if len(losses) != len(gamma):
        raise ConfigError(f"{len(losses)} level losses but {len(gamma)} weights")
    return float(sum(g * l for g, l in zip(gamma, losses)))


@dataclass
class TrainResult:
    encoder: object
    decoders: list
    history: list
    config: dict
    wall_clock: float = 0.0


class _BatchSampler:
    """Seeded sampling of episodes and pseudo-labelled extras from a fold's training split."""

    def __init__(self, records, config, episode_seed, extra_seed):
        self.records = records
        self.config = config
        self.by_class = {}
        for i, r in enumerate(records):
            self.by_class.setdefault(r.class_id, []).append(i)
        self.classes = sorted(c for c, idx in self.by_class.items() if len(idx) >= 2)
        if not self.classes:
            raise DataError("training split has no class with two or more images")
        self.ep_rng = np.random.default_rng(episode_seed)
        self.ex_rng = np.random.default_rng(extra_seed)

    def pairs(self):
        out = []
        rng = self.ep_rng
        for _ in range(self.config.pairs_per_batch):
            c = self.classes[int(rng.integers(len(self.classes)))]
            i, j = rng.choice(self.by_class[c], size=2, replace=False)
            pair = []
            for k in (i, j):
                img, mask = self.records[k].image, self.records[k].mask
                if self.config.flip_pairs and rng.random() < 0.5:
                    img, mask = hflip(img, mask)
                pair.append((img, mask))
            out.append(pair)
        return out

    def extras(self, pseudo_labels, image_size):
        rng = self.ex_rng
        imgs, labels = [], []
        for _ in range(self.config.extra_images_per_batch):
            r = self.records[int(rng.integers(len(self.records)))]
            if r.id not in pseudo_labels:
                raise DataError(f"missing pseudo labels for image {r.id}")
            stack = np.stack([upsample_labels(l, image_size) for l in pseudo_labels[r.id].levels])
            img = r.image
            if self.config.strong_augment:
                if rng.random() < 0.5:
                    img, stack = hflip(img, stack)
                img = color_jitter(img, rng)
                img, stack = random_resized_crop(img, stack, rng)
            imgs.append(img)
            labels.append(stack)
        return np.stack(imgs), np.stack(labels)


def _to_nchw(images):
    return np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))


def _train(records, config, pseudo_labels=None, level_sizes=None, weights=None, lr_override=None,
           callback=None):
    if not records:
        raise DataError("empty training split")
    t0 = time.perf_counter()
    ss = np.random.SeedSequence(config.seed)
    init_seed, dec_seed, ep_seed, ex_seed = ss.spawn(4)
    encoder = tiny_encoder(np.random.default_rng(init_seed))
    image_size = records[0].image.shape[:2]
    use_pseudo = pseudo_labels is not None
    decoders = []
    if use_pseudo:
        if weights is None:
            weights = LossWeights(gamma=(1.0,) * len(level_sizes))
        if len(weights.gamma) != len(level_sizes):
            raise ConfigError(f"{len(level_sizes)} pseudo-label levels but {len(weights.gamma)} gammas")
        dec_rng = np.random.default_rng(dec_seed)
        decoders = [level_decoder(encoder.out_channels, fg + bg, image_size, dec_rng, config.decoder_width)
                    for fg, bg in level_sizes]
    seg_weight = weights.seg_weight if weights is not None else 1.0
    layers = list(encoder.parameter_layers())
    for d in decoders:
        layers.extend(d.parameter_layers())
    opt = SGD(layers, config.sgd, lr_override=lr_override)
    sampler = _BatchSampler(records, config, ep_seed, ex_seed)
    P = config.pairs_per_batch
    history = []
    for step in range(config.total_iterations):
        pairs = sampler.pairs()
        batch = [p[0][0] for p in pairs] + [p[1][0] for p in pairs]
        if use_pseudo:
            ex_imgs, ex_labels = sampler.extras(pseudo_labels, image_size)
            batch = batch + list(ex_imgs)
        feats = encoder.forward(_to_nchw(batch), train=True)
        dfeats = np.zeros_like(feats)
        l_seg = 0.0
        for i, ((s_img, s_mask), (q_img, q_mask)) in enumerate(pairs):
            loss, dq, (ds,) = seg_loss(feats[P + i], [feats[i]], [s_mask], q_mask, config.temperature)
            l_seg += loss / P
            dfeats[P + i] += dq * (seg_weight / P)
            dfeats[i] += ds * (seg_weight / P)
        level_losses = []
        if use_pseudo:
            ex_feats = feats[2 * P:]
            for l, dec in enumerate(decoders):
                logits = dec.forward(ex_feats, train=True)
                loss, dlogits = pseudo_cls_loss(logits, ex_labels[:, l], l)
                level_losses.append(loss)
                dfeats[2 * P:] += dec.backward(dlogits * weights.gamma[l])
        encoder.backward(dfeats)
        lr = opt.step(step)
        total = seg_weight * l_seg + (total_pseudo_loss(level_losses, weights) if use_pseudo else 0.0)
        entry = {"step": step, "lr": lr, "seg": l_seg, "pseudo": level_losses, "total": total}
        history.append(entry)
        if callback is not None:
            callback(entry)
        if step % 50 == 0:
            log.info("step %d seg %.4f pseudo %s total %.4f", step, l_seg,
                     ["%.3f" % x for x in level_losses], total)
    return TrainResult(encoder, decoders, history, config.to_dict(), time.perf_counter() - t0)


def train_baseline(records, config, lr_override=None, callback=None):
    """Train the encoder with the episodic segmentation loss only."""
    return _train(records, config, lr_override=lr_override, callback=callback)


def train_spfl(records, pseudo_labels, level_sizes, config, weights=None, pseudo_branch=True,
               lr_override=None, callback=None):
    """Joint training: segmentation loss on base-class pairs plus per-level pseudo-label losses.

    With ``pseudo_branch=False`` the run is identical to ``train_baseline``.
    The returned decoders are training-only heads.
    """
    if not pseudo_branch:
        return _train(records, config, lr_override=lr_override, callback=callback)
    return _train(records, config, pseudo_labels, list(level_sizes), weights, lr_override, callback)
