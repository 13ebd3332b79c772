import numpy as np
import pytest

from gaflow.errors import ConfigurationError, DimensionError
from gaflow.nets import SkipUNet, SkipUNetConfig, parameter_count, unet_forward
from gaflow.tensor import Tape, Tensor, backward, no_grad, tsum


@pytest.fixture
def small_unet():
    config = SkipUNetConfig(3, 2, depth=2, base_width=4, emit_decoder_features=True)
    return SkipUNet(config, np.random.default_rng(0))


def test_parameter_count(small_unet):
    assert parameter_count(small_unet.config) == 3758
    assert small_unet.parameter_count() == 3758


def test_widths_are_capped():
    config = SkipUNetConfig(3, 1, depth=5, base_width=16)
    assert config.widths == [16, 32, 64, 128, 128, 128]


def test_forward_shapes(small_unet):
    out, features = small_unet(Tensor(np.zeros((2, 3, 8, 12))))
    assert out.shape == (2, 2, 8, 12)
    assert [f.shape[2:] for f in features] == [(2, 3), (4, 6), (8, 12)]
    assert [f.shape[1] for f in features] == [16, 8, 4]


def test_extent_must_be_divisible(small_unet):
    with pytest.raises(ConfigurationError):
        small_unet(Tensor(np.zeros((1, 3, 6, 8))))


def test_channel_mismatch(small_unet):
    with pytest.raises(DimensionError):
        small_unet(Tensor(np.zeros((1, 4, 8, 8))))


def test_depth_at_least_two():
    with pytest.raises(ConfigurationError):
        SkipUNetConfig(3, 1, depth=1)


def test_features_only_when_requested():
    net = SkipUNet(SkipUNetConfig(1, 1, depth=2, base_width=2), np.random.default_rng(0))
    _, features = net(Tensor(np.zeros((1, 1, 4, 4))))
    assert features == []


def test_disabled_skip_changes_output(small_unet):
    x = Tensor(np.random.default_rng(1).random((1, 3, 8, 8)))
    with no_grad():
        a, _ = small_unet(x)
        b, _ = small_unet(x, frozenset({0}))
    assert not np.allclose(a.data, b.data)


def test_every_weight_receives_gradient(small_unet):
    x = Tensor(np.random.default_rng(2).random((1, 3, 8, 8)))
    small_unet.zero_grad()
    with Tape() as tape:
        out, _ = small_unet(x)
        backward(tsum(out * out))
        tape.clear()
    # biases ahead of instance norm cancel out, so only the weights are checked
    weights = [p for k, p in small_unet.named_parameters() if k.endswith("weight")]
    assert len(weights) == 6
    assert all(np.any(p.grad != 0) for p in weights)


def test_unet_forward_passes_disabled_skips(small_unet):
    x = Tensor(np.random.default_rng(4).random((1, 3, 8, 8)))
    with no_grad():
        out, features = unet_forward(small_unet, x)
        direct, _ = small_unet(x)
        cut, _ = unet_forward(small_unet, x, frozenset({0}))
    assert np.array_equal(out.data, direct.data)
    assert len(features) == 3
    assert not np.allclose(out.data, cut.data)
