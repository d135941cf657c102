import numpy as np
import pytest

from fewshot_seg.layers import Linear
from fewshot_seg.optim import SGD, SgdConfig, sgd_step
from fewshot_seg.validation import ConfigError


def scalar_layer(w, g):
    lin = Linear(1, 1, dtype=np.float64)
    lin.params = {"weight": np.array([[w]], dtype=np.float64)}
    lin.grads = {"weight": np.array([[g]], dtype=np.float64)}
    return lin


def test_plain_step():
    layer = scalar_layer(1.0, 2.0)
    sgd_step([layer], SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0), 0)
    assert layer.params["weight"][0, 0] == pytest.approx(0.8)
    assert layer.grads["weight"][0, 0] == 0.0


def test_schedule():
    cfg = SgdConfig()
    assert cfg.lr_at(0) == pytest.approx(1e-3)
    assert cfg.lr_at(1999) == pytest.approx(1e-3)
    assert cfg.lr_at(2000) == pytest.approx(1e-4)
    assert cfg.lr_at(4000) == pytest.approx(1e-5)


def test_momentum_recursion():
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    layer = scalar_layer(1.0, 0.0)
    opt = SGD([layer], cfg)
    w, v = 1.0, 0.0
    for step in range(2):
        layer.grads["weight"][...] = 0.5
        opt.step(step)
        v = 0.9 * v + 0.5 + 0.01 * w
        w -= 0.1 * v
    assert layer.params["weight"][0, 0] == pytest.approx(w)


def test_lr_override_zero_is_noop():
    layer = scalar_layer(1.0, 3.0)
    SGD([layer], SgdConfig(), lr_override=0.0).step(0)
    assert layer.params["weight"][0, 0] == 1.0


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"momentum": 1.0}, {"weight_decay": -1},
                                    {"decay_every": 0}, {"decay_factor": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SgdConfig(**kwargs)
