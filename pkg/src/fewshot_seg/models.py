"""Encoder and decoder networks, plus checkpoint persistence."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import config_hash, read_ftns, read_json, write_ftns, write_json
from .layers import BatchNorm2d, BilinearUpsample, Conv2d, ReLU, Sequential
from .validation import ConfigError, DimensionError


class Encoder(Sequential):
    """Image (N, 3, H, W) -> features (N, C, H/stride, W/stride)."""

    kind = "encoder"

    def __init__(self, layers, out_channels, stride):
        super().__init__(layers)
        self.out_channels = out_channels
        self.stride = stride

    def encode(self, images, batch_size=64):
        """Eval-mode features for a stack of (H, W, 3) images."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        H, W = images.shape[1:3]
        if H % self.stride or W % self.stride:
            raise DimensionError(f"image size {(H, W)} not divisible by output stride {self.stride}")
        out = []
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size].transpose(0, 3, 1, 2)
            out.append(self.forward(np.ascontiguousarray(x), train=False))
        return np.concatenate(out)

    def config(self):
        cfg = super().config()
        cfg.update(kind=self.kind, out_channels=self.out_channels, stride=self.stride)
        return cfg


class IdentityEncoder(Encoder):
    """Pass-through for precomputed (C, h, w) feature maps."""

    kind = "identity"

    def __init__(self, channels, stride=1):
        super().__init__([], channels, stride)

    def encode(self, features, batch_size=64):
        features = np.asarray(features, dtype=np.float32)
        return features[None] if features.ndim == 3 else features


def tiny_encoder(seed=0, widths=(16, 32, 32), dtype=np.float32):
    """conv3x3(3->16)+BN+ReLU, stride-2 conv3x3(16->32)+BN+ReLU, conv3x3(32->32)+BN+ReLU."""
    rng = np.random.default_rng(seed)
    c1, c2, c3 = widths
    layers = [
        Conv2d(3, c1, 3, 1, rng=rng, dtype=dtype), BatchNorm2d(c1, dtype=dtype), ReLU(),
        Conv2d(c1, c2, 3, 2, rng=rng, dtype=dtype), BatchNorm2d(c2, dtype=dtype), ReLU(),
        Conv2d(c2, c3, 3, 1, rng=rng, dtype=dtype), BatchNorm2d(c3, dtype=dtype), ReLU(),
    ]
    return Encoder(layers, c3, 2)


def level_decoder(channels, num_labels, image_size, seed=0, width=None, dtype=np.float32):
    """Two conv3x3+BN+ReLU blocks, a 1x1 classifier conv and a bilinear upsample.

    ``width`` is the hidden channel count of the two 3x3 blocks (default: ``channels``).
    """
    rng = np.random.default_rng(seed)
    width = width or channels
    return Sequential([
        Conv2d(channels, width, 3, 1, rng=rng, dtype=dtype), BatchNorm2d(width, dtype=dtype), ReLU(),
        Conv2d(width, width, 3, 1, rng=rng, dtype=dtype), BatchNorm2d(width, dtype=dtype), ReLU(),
        Conv2d(width, num_labels, 1, 1, rng=rng, dtype=dtype),
        BilinearUpsample(image_size),
    ])


def _build(cfg):
    kind = cfg["kind"]
    if kind == "conv2d":
        return Conv2d(cfg["in_channels"], cfg["out_channels"], cfg["kernel_size"], cfg["stride"], cfg["padding"])
    if kind == "batch_norm2d":
        return BatchNorm2d(cfg["num_channels"], cfg["momentum"], cfg["eps"])
    if kind == "relu":
        return ReLU()
    if kind == "bilinear_upsample":
        return BilinearUpsample(cfg["size"])
    if kind == "sequential":
        return Sequential([_build(c) for c in cfg["layers"]])
    if kind == "encoder":
        return Encoder([_build(c) for c in cfg["layers"]], cfg["out_channels"], cfg["stride"])
    if kind == "identity":
        return IdentityEncoder(cfg["out_channels"], cfg["stride"])
    raise ConfigError(f"unknown layer kind {kind!r}")


def save_checkpoint(directory, encoder, decoders=(), meta=None):
    """One FTNS file per parameter array plus ``manifest.json`` describing topology."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nets = {"encoder": encoder}
    nets.update({f"decoder{l}": d for l, d in enumerate(decoders)})
    files = {}
    for name, net in nets.items():
        for key, arr in net.state().items():
            fname = f"{name}.{key}.ftns"
            write_ftns(directory / fname, arr)
            files[f"{name}.{key}"] = fname
    manifest = {
        "topology": {name: net.config() for name, net in nets.items()},
        "files": files,
        "meta": meta or {},
    }
    manifest["config_hash"] = config_hash(manifest["meta"].get("config", {}))
    manifest["weights_hash"] = weights_hash(encoder)
    write_json(directory / "manifest.json", manifest)
    return manifest


def load_checkpoint(directory):
    """Returns ``(encoder, decoders, manifest)``."""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    nets = {}
    for name, topo in manifest["topology"].items():
        net = _build(topo)
        prefix = name + "."
        state = {k[len(prefix):]: read_ftns(directory / f) for k, f in manifest["files"].items()
                 if k.startswith(prefix)}
        net.load_state(state)
        nets[name] = net
    decoders = [nets[f"decoder{l}"] for l in range(len(nets) - 1)]
    return nets["encoder"], decoders, manifest


def weights_hash(net):
    import hashlib

    h = hashlib.sha256()
    for key, arr in sorted(net.state().items()):
        h.update(key.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()[:16]
