import numpy as np
import pytest

from conftest import away_from_zero
from fewshot_seg.layers import (
    BatchNorm2d,
    BilinearUpsample,
    Conv2d,
    Dropout,
    Linear,
    ReLU,
    Sequential,
    UninitializedStatisticsError,
    bilinear_resize,
    interpolation_matrix,
    layer_forward_backward,
)
from fewshot_seg.numerics import finite_difference_check
from fewshot_seg.validation import ConfigError, DimensionError

F64 = np.float64


def layer_grad_error(layer, x, rng, mode="train"):
    """Max finite-difference error over the input and every parameter of ``layer``."""
    R = rng.normal(size=layer.forward(x, train=(mode == "train")).shape)

    def fn(params):
        out, back = layer_forward_backward(layer, params[0], mode)
        dx, grads = back(R)
        return float((out * R).sum()), [dx] + [grads[k] for k in layer.params]

    return finite_difference_check(fn, [x] + list(layer.params.values()), eps=1e-4)


def test_relu_example():
    out, back = layer_forward_backward(ReLU(), np.array([[-1.0, 2.0]]))
    assert np.array_equal(out, [[0.0, 2.0]])
    dx, _ = back(np.array([[5.0, 7.0]]))
    assert np.array_equal(dx, [[0.0, 7.0]])


def test_identity_1x1_conv(rng):
    conv = Conv2d(3, 3, 1, dtype=F64)
    conv.params["weight"][...] = np.eye(3)[:, :, None, None]
    x = rng.normal(size=(2, 3, 5, 5))
    assert np.allclose(conv.forward(x), x)


def test_conv_preserves_size_and_strides(rng):
    x = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
    assert Conv2d(4, 5, 3).forward(x).shape == (2, 5, 6, 6)
    assert Conv2d(4, 5, 3, 2).forward(x).shape == (2, 5, 3, 3)
    with pytest.raises(DimensionError):
        Conv2d(3, 5).forward(x)


def test_conv_matches_direct_loop(rng):
    conv = Conv2d(2, 3, 3, dtype=F64, rng=1)
    conv.params["bias"][...] = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 5, 5))
    out = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * conv.params["weight"][o]).sum() + conv.params["bias"][o]
    assert np.allclose(out, ref)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient(seed, stride):
    rng = np.random.default_rng(seed)
    conv = Conv2d(2, 3, 3, stride, rng=seed, dtype=F64)
    assert layer_grad_error(conv, rng.normal(size=(2, 2, 6, 6)), rng) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    lin = Linear(5, 4, rng=seed, dtype=F64)
    assert layer_grad_error(lin, rng.normal(size=(7, 5)), rng) < 1e-3


def test_relu_gradient(rng):
    assert layer_grad_error(ReLU(), away_from_zero(rng, (2, 3, 4, 4)), rng) < 1e-3


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradient(rng, mode):
    bn = BatchNorm2d(3, dtype=F64)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, size=3)
    bn.params["beta"][...] = rng.normal(size=3)
    bn.forward(rng.normal(size=(2, 3, 4, 4)), train=True)
    assert layer_grad_error(bn, rng.normal(size=(2, 3, 6, 6)), rng, mode) < 1e-3


def test_batchnorm_running_stats(rng):
    bn = BatchNorm2d(2, momentum=0.5)
    with pytest.raises(UninitializedStatisticsError):
        bn.forward(np.zeros((1, 2, 2, 2), np.float32), train=False)
    x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5)).astype(np.float32)
    out = bn.forward(x, train=True)
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(bn.running_mean, x.mean(axis=(0, 2, 3)), atol=1e-5)
    a = bn.forward(x, train=False)
    b = bn.forward(x, train=False)
    assert np.array_equal(a, b)
    with pytest.raises(ConfigError):
        BatchNorm2d(2, eps=0)


def test_dropout_modes(rng):
    d = Dropout(0.5, rng=0)
    x = np.ones((100, 10))
    assert np.array_equal(d.forward(x, train=False), x)
    out = d.forward(x, train=True)
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.3 < (out > 0).mean() < 0.7
    with pytest.raises(ConfigError):
        Dropout(1.0)


def test_dropout_gradient_fixed_mask(rng):
    d = Dropout(0.3)
    d.fixed_mask = rng.random((2, 3, 4, 4)) >= 0.3
    assert layer_grad_error(d, rng.normal(size=(2, 3, 4, 4)), rng) < 1e-3


def test_interpolation_matrix_corner_aligned():
    A = interpolation_matrix(5, 3)
    assert np.allclose(A.sum(axis=1), 1.0)
    assert np.allclose(A @ np.array([0.0, 1.0, 2.0]), [0, 0.5, 1.0, 1.5, 2.0])


def test_bilinear_upsample_values_and_gradient(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    up = BilinearUpsample((6, 6))
    out = up.forward(x)
    assert out.shape == (2, 2, 6, 6)
    assert np.allclose(out[..., 0, 0], x[..., 0, 0]) and np.allclose(out[..., -1, -1], x[..., -1, -1])
    assert layer_grad_error(up, x, rng) < 1e-3
    assert np.allclose(bilinear_resize(np.ones((3, 3)), (7, 7)), 1.0)


def test_sequential_state_roundtrip(rng):
    net = Sequential([Conv2d(3, 4, rng=0), BatchNorm2d(4), ReLU()])
    net.forward(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
    state = {k: v.copy() for k, v in net.state().items()}
    assert "1.running_mean" in state
    other = Sequential([Conv2d(3, 4, rng=9), BatchNorm2d(4), ReLU()])
    other.load_state(state)
    x = rng.normal(size=(1, 3, 4, 4)).astype(np.float32)
    assert np.array_equal(net.forward(x, train=False), other.forward(x, train=False))


def test_eval_mode_deterministic(rng):
    net = Sequential([Conv2d(3, 4, rng=0), BatchNorm2d(4), ReLU(), Dropout(0.5)])
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    net.forward(x, train=True)
    assert np.array_equal(net.forward(x, train=False), net.forward(x, train=False))


def test_layer_forward_backward_rejects_mode():
    with pytest.raises(ConfigError):
        layer_forward_backward(ReLU(), np.zeros((1, 1)), "test")
