"""Momentum SGD with weight decay and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import ConfigError


@dataclass
class SgdConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_every: int = 2000
    decay_factor: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be a positive step count")
        if not self.decay_factor > 0:
            raise ConfigError("decay_factor must be > 0")

    def lr_at(self, step):
        return self.learning_rate * self.decay_factor ** (step // self.decay_every)


class SGD:
    """Stateful optimizer over the parameter dicts of a list of layers.

    ``lr_override`` lets callers run with a learning rate of exactly zero,
    which ``SgdConfig`` forbids.
    """

    def __init__(self, layers, config, lr_override=None):
        self.layers = list(layers)
        self.config = config
        self.lr_override = lr_override
        self.velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in self.layers]

    def step(self, step):
        cfg = self.config
        lr = cfg.lr_at(step) if self.lr_override is None else self.lr_override
        for layer, vel in zip(self.layers, self.velocity):
            for name, w in layer.params.items():
                g = layer.grads[name]
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * w
                v = vel[name]
                v *= cfg.momentum
                v += g
                w -= (lr * v).astype(w.dtype, copy=False)
            layer.zero_grad()
        return lr


def sgd_step(layers, config, step, state=None):
    """Functional form: apply one SGD update; ``state`` carries momentum buffers."""
    if state is None:
        state = SGD(layers, config)
    state.step(step)
    return state
