"""Per-pixel, per-level pseudo labels by nearest-prototype cosine matching."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import read_ftns, read_json, write_ftns, write_json
from .validation import DimensionError, check_feature_map, downsample_mask


@dataclass
class PseudoLabelStack:
    levels: list  # (h, w) int32 label map per level, finest first
    level_sizes: list  # (K_fg, K_bg) per level

    def num_labels(self, level):
        fg, bg = self.level_sizes[level]
        return fg + bg


def hierarchy_hash(hierarchy):
    h = hashlib.sha256()
    for fg, bg in hierarchy.levels:
        h.update(np.ascontiguousarray(fg, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(bg, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def assign_pseudo_labels(features, fg_mask, hierarchy):
    """Label every feature cell with its most cosine-similar prototype per level.

    Foreground cells choose among that level's fg prototypes (ids
    ``[0, K_fg)``), background cells among the bg prototypes (ids offset by
    ``K_fg``). ``fg_mask`` may be given at image resolution; it is then
    majority-vote downsampled to the feature grid. Ties go to the lowest index.
    """
    features = check_feature_map(features)
    C, h, w = features.shape
    if hierarchy.channels != C:
        raise DimensionError(f"hierarchy has {hierarchy.channels} channels, features have {C}")
    fg = downsample_mask(fg_mask, (h, w)).ravel()
    X = features.reshape(C, -1).T.astype(np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Xn = np.where(norms > 1e-12, X / np.maximum(norms, 1e-12), 0.0)
    levels = []
    for P_fg, P_bg in hierarchy.levels:
        labels = np.empty(h * w, dtype=np.int32)
        for protos, sel, offset in ((P_fg, fg, 0), (P_bg, ~fg, P_fg.shape[0])):
            if not sel.any():
                continue
            P = np.asarray(protos, dtype=np.float64)
            pn = np.linalg.norm(P, axis=1, keepdims=True)
            P = np.where(pn > 1e-12, P / np.maximum(pn, 1e-12), 0.0)
            labels[sel] = (Xn[sel] @ P.T).argmax(axis=1) + offset
        levels.append(labels.reshape(h, w))
    return PseudoLabelStack(levels, list(hierarchy.level_sizes))


def save_pseudo_labels(directory, stacks, hierarchy):
    """Persist ``{image_id: PseudoLabelStack}`` as FTNS integer tensors plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = sorted(stacks)
    for image_id in ids:
        for l, labels in enumerate(stacks[image_id].levels):
            write_ftns(directory / f"{image_id}_level{l}.ftns", labels.astype(np.int32))
    write_json(directory / "manifest.json", {
        "hierarchy_hash": hierarchy_hash(hierarchy),
        "level_sizes": [list(s) for s in hierarchy.level_sizes],
        "images": ids,
    })


def load_pseudo_labels(directory):
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    sizes = [tuple(s) for s in manifest["level_sizes"]]
    stacks = {}
    for image_id in manifest["images"]:
        levels = [read_ftns(directory / f"{image_id}_level{l}.ftns") for l in range(len(sizes))]
        stacks[image_id] = PseudoLabelStack(levels, sizes)
    return stacks, manifest
