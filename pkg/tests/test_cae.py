import math

import numpy as np
import numpy.testing as npt
import pytest

from hypercae.cae import (
    CaeLayer,
    cae_decode,
    cae_encode,
    cae_grads,
    cae_loss,
    flip_swap,
    new_cae_layer,
    pretrain_layer,
    pretrain_stack,
)
from hypercae.errors import ConfigurationError, NumericDivergenceError
from hypercae.layers import fd_max_rel_error
from hypercae.network import ConvSpec, HyperSpec, NetworkConfig, TrainingParams
from hypercae.tensor import KernelBank, maxpool2


def scalar_layer(w, b, wt, c, tied=False):
    return CaeLayer(
        encoder=KernelBank(np.full((1, 1, 1, 1), w), np.array([b])),
        decoder=KernelBank(np.full((1, 1, 1, 1), wt), np.array([c])),
        stride=1,
        tied=tied,
    )


def test_encode_zero_parameters():
    layer = scalar_layer(0.0, 0.0, 0.0, 0.0)
    npt.assert_array_equal(cae_encode(layer, np.ones((1, 1, 3, 3))), np.zeros((1, 1, 3, 3)))


def test_encode_scalar_reference():
    w, b, x = 0.7, -0.2, 0.4
    layer = scalar_layer(w, b, 0.0, 0.0)
    got = cae_encode(layer, np.full((1, 1, 1, 1), x))[0, 0, 0, 0]
    assert abs(got - math.tanh(w * x + b)) < 1e-12


def test_decode_scalar_chain():
    w, b, wt, c, x = 0.7, -0.2, 0.3, 0.1, 0.4
    layer = scalar_layer(w, b, wt, c)
    h = cae_encode(layer, np.full((1, 1, 1, 1), x))
    y = cae_decode(layer, h, (1, 1))[0, 0, 0, 0]
    want = math.tanh(wt * math.tanh(w * x + b) + c)
    assert abs(y - want) < 1e-12


def test_reference_layer1_code_and_reconstruction_shapes():
    rng = np.random.default_rng(0)
    layer = new_cae_layer(rng, in_maps=1, code_maps=50, kernel=13, stride=2)
    x = rng.uniform(-1, 1, (1, 1, 100, 100))
    h = cae_encode(layer, x)
    assert h.shape == (1, 50, 50, 50)
    y = cae_decode(layer, h, (100, 100))
    assert y.shape == (1, 1, 100, 100)


@pytest.mark.parametrize("stride,size", [(1, 9), (2, 9), (1, 8), (2, 11)])
def test_round_trip_shape_identity(stride, size):
    rng = np.random.default_rng(size)
    layer = new_cae_layer(rng, in_maps=2, code_maps=3, kernel=3, stride=stride)
    x = rng.uniform(-1, 1, (2, 2, size, size))
    y = cae_decode(layer, cae_encode(layer, x), (size, size))
    assert y.shape == x.shape


def test_loss_basics():
    x = np.ones((1, 1, 1, 2))
    assert cae_loss(x, x) == 0.0
    assert cae_loss(x, np.zeros_like(x)) == 1.0
    with pytest.raises(ConfigurationError):
        cae_loss(x, np.zeros((1, 1, 2, 2)))


def test_loss_matches_scalar_oracle_and_is_symmetric():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 5))
    y = rng.standard_normal((2, 3, 4, 5))
    acc = 0.0
    for v1, v2 in zip(x.ravel(), y.ravel()):
        acc += (v1 - v2) ** 2
    assert abs(cae_loss(x, y) - acc / x.size) < 1e-12
    assert cae_loss(x, y) == cae_loss(y, x)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    layer = new_cae_layer(rng, in_maps=1, code_maps=2, kernel=3, stride=1)
    x = rng.uniform(-1, 1, (1, 1, 5, 5))
    _, grads = cae_grads(layer, x)
    params = {
        "enc_w": layer.encoder.w,
        "enc_b": layer.encoder.b,
        "dec_w": layer.decoder.w,
        "dec_b": layer.decoder.b,
    }

    def loss():
        return cae_loss(x, cae_decode(layer, cae_encode(layer, x), (5, 5)))

    assert fd_max_rel_error(loss, params, grads, 1e-5) < 1e-5


def test_pretrain_lr_zero_is_pure():
    rng = np.random.default_rng(3)
    layer = new_cae_layer(rng, 1, 2, 3)
    before = (layer.encoder.w.copy(), layer.encoder.b.copy(), layer.decoder.w.copy(), layer.decoder.b.copy())
    inputs = rng.uniform(-1, 1, (8, 1, 6, 6))
    history = pretrain_layer(layer, inputs, epochs=3, learning_rate=0.0, batch_size=4, seed=0)
    npt.assert_array_equal(layer.encoder.w, before[0])
    npt.assert_array_equal(layer.encoder.b, before[1])
    npt.assert_array_equal(layer.decoder.w, before[2])
    npt.assert_array_equal(layer.decoder.b, before[3])
    assert len(set(history)) == 1  # constant loss across epochs


def test_pretrain_constant_image_learns():
    rng = np.random.default_rng(4)
    layer = new_cae_layer(rng, 1, 1, 1)
    inputs = np.full((1, 1, 3, 3), 0.5)
    history = pretrain_layer(layer, inputs, epochs=200, learning_rate=0.1, batch_size=1, seed=0)
    assert history[-1] < history[0]


def test_tied_mode_keeps_decoder_mirrored():
    rng = np.random.default_rng(5)
    layer = new_cae_layer(rng, 2, 3, 3, tied=True)
    npt.assert_array_equal(layer.decoder.w, flip_swap(layer.encoder.w))
    inputs = rng.uniform(-1, 1, (6, 2, 5, 5))
    pretrain_layer(layer, inputs, epochs=3, learning_rate=0.05, batch_size=2, seed=1)
    npt.assert_array_equal(layer.decoder.w, flip_swap(layer.encoder.w))


def test_non_finite_loss_aborts_with_epoch():
    rng = np.random.default_rng(6)
    layer = new_cae_layer(rng, 1, 1, 3)
    bad = np.full((2, 1, 4, 4), np.nan)
    with pytest.raises(NumericDivergenceError, match="epoch 0"):
        pretrain_layer(layer, bad, epochs=1, learning_rate=0.1, batch_size=2, seed=0)


def stack_config(n_scales):
    convs = [ConvSpec(4, 5, 2), ConvSpec(6, 3, 1), ConvSpec(8, 3, 1)][:n_scales]
    return NetworkConfig(
        input_spatial=(16, 16),
        convs=tuple(convs),
        hyper=HyperSpec(out_neurons=12, weights=(1,) * n_scales),
        dense=(8,),
        training=TrainingParams(epochs_pretrain=2, seed=9),
    )


def test_stack_trains_each_layer_on_pooled_codes():
    rng = np.random.default_rng(7)
    config = stack_config(3)
    images = rng.uniform(-1, 1, (10, 1, 16, 16))
    stack, report = pretrain_stack(config, images, epochs=2, seed=9)
    assert len(stack) == 3 and len(report.losses) == 3
    # spatial chain: 16 -> conv s2 -> 8 -> pool -> 4 -> conv -> 4 -> pool -> 2
    h1 = cae_encode(stack[0], images)
    assert h1.shape[2:] == (8, 8)
    p1 = maxpool2(h1)[0]
    assert p1.shape[2:] == (4, 4)
    h2 = cae_encode(stack[1], p1)
    assert h2.shape[2:] == (4, 4)
    assert maxpool2(h2)[0].shape[2:] == (2, 2)


def test_single_layer_stack_degenerates_to_pretrain_layer():
    rng = np.random.default_rng(8)
    images = rng.uniform(-1, 1, (10, 1, 16, 16))
    config = stack_config(1)
    stack, report = pretrain_stack(config, images, epochs=3, learning_rate=0.05, batch_size=4, seed=11)

    manual = new_cae_layer(np.random.default_rng(11), 1, 4, 5, stride=2)
    history = pretrain_layer(manual, images, epochs=3, learning_rate=0.05, batch_size=4, seed=11)
    assert report.losses[0] == history
    npt.assert_array_equal(stack[0].encoder.w, manual.encoder.w)


def test_stack_losses_improve_on_texture_data(tiny_pretrained):
    _, _, _, report = tiny_pretrained
    for history in report.losses:
        assert history[-1] < history[0]


def test_stack_with_lr_zero_is_pure():
    rng = np.random.default_rng(10)
    images = rng.uniform(-1, 1, (8, 1, 16, 16))
    config = stack_config(2)
    stack_a, rep_a = pretrain_stack(config, images, epochs=2, learning_rate=0.0, seed=21)
    stack_b, rep_b = pretrain_stack(config, images, epochs=2, learning_rate=0.0, seed=21)
    assert rep_a.losses == rep_b.losses
    for la, lb in zip(stack_a, stack_b):
        npt.assert_array_equal(la.encoder.w, lb.encoder.w)
        npt.assert_array_equal(la.decoder.w, lb.decoder.w)
    # parameters equal a freshly initialised, never-trained stack
    fresh = new_cae_layer(np.random.default_rng(21), 1, 4, 5, stride=2)
    npt.assert_array_equal(stack_a[0].encoder.w, fresh.encoder.w)
