"""Layer primitives with hand-written backward passes.

Every layer works on batched arrays: images as (N, C, H, W), vectors as
(N, D). ``forward`` caches what ``backward`` needs; ``backward`` returns the
input gradient and accumulates parameter gradients into ``grads``.
"""

from __future__ import annotations

import numpy as np

from .validation import ConfigError, DimensionError


class UninitializedStatisticsError(RuntimeError):
    """Batch norm was run in eval mode before any training step."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def state(self):
        """Arrays that make up the persisted state of this layer."""
        return dict(self.params)

    def load_state(self, state):
        for k, v in state.items():
            self.params[k][...] = v

    def config(self):
        return {"kind": self.kind}


class Conv2d(Layer):
    """Direct 2-D convolution; zero padding ``k // 2`` keeps size at stride 1."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding=None, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        rng = np.random.default_rng(rng)
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel_size, kernel_size))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_channels, dtype=dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding}

    def _out_size(self, H, W):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        N, C, H, W = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        Ho, Wo = self._out_size(H, W)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((C, k, k, N, Ho, Wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s].transpose(1, 0, 2, 3)
        cols2d = cols.reshape(C * k * k, N * Ho * Wo)
        w2d = self.params["weight"].reshape(self.out_channels, -1)
        out = w2d @ cols2d + self.params["bias"][:, None]
        self._cache = (x.shape, cols2d)
        return out.reshape(self.out_channels, N, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(self, dout):
        (N, C, H, W), cols2d = self._cache
        k, s, p = self.kernel_size, self.stride, self.padding
        Ho, Wo = dout.shape[2:]
        d2d = dout.transpose(1, 0, 2, 3).reshape(self.out_channels, -1)
        self.grads["weight"] += (d2d @ cols2d.T).reshape(self.params["weight"].shape)
        self.grads["bias"] += d2d.sum(axis=1)
        w2d = self.params["weight"].reshape(self.out_channels, -1)
        dcols = (w2d.T @ d2d).reshape(C, k, k, N, Ho, Wo)
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
        return dxp[:, :, p:p + H, p:p + W] if p else dxp


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, init="he"):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = np.random.default_rng(rng)
        if init == "zeros":
            w = np.zeros((out_features, in_features))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(out_features, in_features))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_features, dtype=dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        x = self._cache
        self.grads["weight"] += dout.T @ x
        self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        self._cache = x > 0
        return np.maximum(x, x.dtype.type(0))

    def backward(self, dout):
        return dout * self._cache


class BatchNorm2d(Layer):
    """Per-channel batch normalisation over (N, H, W)."""

    kind = "batch_norm2d"

    def __init__(self, num_channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        if not eps > 0:
            raise ConfigError("batch-norm eps must be > 0")
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(num_channels, dtype=dtype), "beta": np.zeros(num_channels, dtype=dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = None
        self.running_var = None

    def config(self):
        return {"kind": self.kind, "num_channels": self.num_channels, "momentum": self.momentum, "eps": self.eps}

    def state(self):
        out = dict(self.params)
        if self.running_mean is not None:
            out["running_mean"] = self.running_mean
            out["running_var"] = self.running_var
        return out

    def load_state(self, state):
        self.params["gamma"][...] = state["gamma"]
        self.params["beta"][...] = state["beta"]
        if "running_mean" in state:
            self.running_mean = np.array(state["running_mean"], dtype=self.params["gamma"].dtype)
            self.running_var = np.array(state["running_var"], dtype=self.params["gamma"].dtype)

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise DimensionError(f"batch_norm2d expects (N, {self.num_channels}, H, W), got {x.shape}")
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            var = x.var(axis=(0, 2, 3), dtype=np.float64)
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            if self.running_mean is None:
                self.running_mean = mean.astype(x.dtype)
                self.running_var = unbiased.astype(x.dtype)
            else:
                self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(x.dtype)
                self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(x.dtype)
            inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
            self._cache = (xhat, inv, True)
        else:
            if self.running_mean is None:
                raise UninitializedStatisticsError("batch norm has no running statistics yet")
            inv = (1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)).astype(x.dtype)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self._cache = (xhat, inv, False)
        return xhat * g + b

    def backward(self, dout):
        xhat, inv, train = self._cache
        self.grads["gamma"] += (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.params["gamma"][None, :, None, None]
        if not train:
            return dxhat * inv[None, :, None, None]
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * inv[None, :, None, None]


class Dropout(Layer):
    """Inverted dropout: scales kept units by 1/(1-p) in train mode, identity in eval."""

    kind = "dropout"

    def __init__(self, rate=0.1, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(rng)
        self.fixed_mask = None

    def config(self):
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x, train=True):
        if not train or self.rate == 0.0:
            self._cache = None
            return x
        if self.fixed_mask is not None:
            keep = self.fixed_mask
        else:
            keep = self.rng.random(x.shape, dtype=np.float32) >= self.rate
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        self._cache = keep * scale
        return x * self._cache

    def backward(self, dout):
        return dout if self._cache is None else dout * self._cache


def interpolation_matrix(n_out, n_in, dtype=np.float64):
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    A = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        A[:, 0] = 1.0
        return A.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[np.arange(n_out), lo] = 1.0 - frac
    A[np.arange(n_out), lo + 1] += frac
    return A.astype(dtype)


class BilinearUpsample(Layer):
    """Maps (N, C, h, w) to (N, C, H, W) with corner-aligned bilinear interpolation."""

    kind = "bilinear_upsample"

    def __init__(self, size):
        super().__init__()
        self.size = tuple(size)

    def config(self):
        return {"kind": self.kind, "size": list(self.size)}

    def forward(self, x, train=True):
        h, w = x.shape[-2:]
        H, W = self.size
        Ah = interpolation_matrix(H, h, x.dtype)
        Aw = interpolation_matrix(W, w, x.dtype)
        self._cache = (Ah, Aw)
        return np.matmul(np.matmul(Ah, x), Aw.T)

    def backward(self, dout):
        Ah, Aw = self._cache
        return np.matmul(np.matmul(Ah.T, dout), Aw)


def bilinear_resize(x, size):
    """Corner-aligned bilinear resize of the trailing two axes."""
    return BilinearUpsample(size).forward(np.asarray(x), train=False)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameter_layers(self):
        for layer in self.layers:
            if isinstance(layer, Sequential):
                yield from layer.parameter_layers()
            elif layer.params:
                yield layer

    def zero_grad(self):
        for layer in self.parameter_layers():
            layer.zero_grad()

    def state(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.state().items():
                out[f"{i}.{k}"] = v
        return out

    def load_state(self, state):
        for i, layer in enumerate(self.layers):
            prefix = f"{i}."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if sub:
                layer.load_state(sub)

    def config(self):
        return {"kind": self.kind, "layers": [layer.config() for layer in self.layers]}


def layer_forward_backward(layer, x, mode="train"):
    """Run ``layer`` forward and return ``(output, backward)``.

    ``backward(dout)`` returns ``(input_grad, param_grads)`` with fresh
    parameter gradients for this call only.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = layer.forward(x, train=(mode == "train"))

    def backward(dout):
        layer.zero_grad()
        dx = layer.backward(dout)
        return dx, {k: g.copy() for k, g in layer.grads.items()}

    return out, backward
