"""Convolutional auto-encoders and greedy layer-wise pretraining.

One :class:`CaeLayer` pairs a convolutional encoder with a transposed-
convolution decoder trained to reconstruct the encoder's input under mean
squared error.  A stack is pretrained bottom-up: each layer trains on the
max-pooled codes of the (frozen) layer below.

Orientation convention: the decoder kernels are stored decode-side, shape
``(in_maps, code_maps, k, k)``.  Decoding runs ``conv2d_transpose`` with the
bank ``rot180(channel-swap(decoder.w))``, so in tied mode (where the decoder
is kept equal to ``rot180(channel-swap(encoder.w))``) decoding is exactly the
adjoint of encoding with the encoder's own kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericDivergenceError
from .layers import glorot_uniform
from .tensor import KernelBank, as_tensor4, conv2d, conv2d_kernel_grad, conv2d_transpose, tanh_grad, maxpool2

__all__ = [
    "CaeLayer",
    "PretrainReport",
    "new_cae_layer",
    "decoder_transpose_bank",
    "flip_swap",
    "cae_encode",
    "cae_decode",
    "cae_loss",
    "cae_grads",
    "pretrain_layer",
    "pretrain_stack",
]


def flip_swap(bank_w: np.ndarray) -> np.ndarray:
    """Rotate kernels 180 degrees spatially and swap the in/out channel axes."""
    return np.ascontiguousarray(np.flip(bank_w, axis=(2, 3)).swapaxes(0, 1))


@dataclass
class CaeLayer:
    """Encoder/decoder pair for one convolutional scale.

    ``encoder.w`` is ``(code_maps, in_maps, k, k)``; ``decoder.w`` is
    ``(in_maps, code_maps, k, k)`` with bias per reconstructed channel.  In
    tied mode the decoder kernels mirror the encoder's (180-degree rotation
    with channel axes swapped) after every update.
    """

    encoder: KernelBank
    decoder: KernelBank
    stride: int = 1
    tied: bool = False

    def __post_init__(self):
        if (
            self.decoder.out_channels != self.encoder.in_channels
            or self.decoder.in_channels != self.encoder.out_channels
        ):
            raise ConfigurationError(
                "decoder channels must mirror the encoder's "
                f"(encoder {self.encoder.w.shape}, decoder {self.decoder.w.shape})"
            )
        if self.tied:
            self.sync_tied()

    def sync_tied(self) -> None:
        """Re-derive the decoder kernels from the encoder's (tied mode)."""
        self.decoder.w = flip_swap(self.encoder.w)


def new_cae_layer(
    rng: np.random.Generator,
    in_maps: int,
    code_maps: int,
    kernel: int,
    stride: int = 1,
    tied: bool = False,
) -> CaeLayer:
    """Freshly initialised CAE layer; biases zero, kernels glorot-uniform."""
    fan_in = in_maps * kernel * kernel
    fan_out = code_maps * kernel * kernel
    enc = KernelBank(
        glorot_uniform(rng, (code_maps, in_maps, kernel, kernel), fan_in, fan_out),
        np.zeros(code_maps),
    )
    dec = KernelBank(
        glorot_uniform(rng, (in_maps, code_maps, kernel, kernel), fan_out, fan_in),
        np.zeros(in_maps),
    )
    return CaeLayer(encoder=enc, decoder=dec, stride=stride, tied=tied)


def decoder_transpose_bank(decoder: KernelBank) -> KernelBank:
    """Bank whose adjoint realises decoding with the stored decoder kernels."""
    return KernelBank(flip_swap(decoder.w), np.zeros(decoder.in_channels))


def cae_encode(layer: CaeLayer, x) -> np.ndarray:
    """tanh(conv(x) + b) with the layer's encoder bank and stride."""
    return np.tanh(conv2d(x, layer.encoder, layer.stride))


def cae_decode(layer: CaeLayer, h, out_spatial: tuple[int, int]) -> np.ndarray:
    """Map codes back to input space: tanh(transposed-conv(h) + c)."""
    h = as_tensor4(h)
    if h.shape[1] != layer.encoder.out_channels:
        raise ConfigurationError(
            f"code has {h.shape[1]} maps, encoder produces {layer.encoder.out_channels}"
        )
    bank = decoder_transpose_bank(layer.decoder)
    pre = conv2d_transpose(h, bank, layer.stride, out_spatial)
    return np.tanh(pre + layer.decoder.b.reshape(1, -1, 1, 1))


def cae_loss(x, y) -> float:
    """Per-element mean squared error between two equally shaped tensors."""
    x = as_tensor4(x)
    y = as_tensor4(y)
    if x.shape != y.shape:
        raise ConfigurationError(f"loss operands differ in shape: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.mean(d * d))


@dataclass
class PretrainReport:
    """Per-layer, per-epoch reconstruction MSE."""

    losses: list[list[float]] = field(default_factory=list)

    def layer(self, k: int) -> list[float]:
        return self.losses[k]


def cae_grads(layer: CaeLayer, x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Reconstruction loss and its gradients for every layer parameter.

    Gradient keys: ``enc_w``, ``enc_b``, ``dec_w`` (in the decoder's stored
    orientation), ``dec_b``.
    """
    h = cae_encode(layer, x)
    bank = decoder_transpose_bank(layer.decoder)
    pre_y = conv2d_transpose(h, bank, layer.stride, (x.shape[2], x.shape[3]))
    pre_y += layer.decoder.b.reshape(1, -1, 1, 1)
    y = np.tanh(pre_y)

    diff = y - x
    loss = float(np.mean(diff * diff))

    dy = (2.0 / y.size) * diff
    dpre_y = dy * tanh_grad(y)
    g_dec_b = dpre_y.sum(axis=(0, 2, 3))
    # pre_y is linear in (h, bank.w); adjoints of conv2d_transpose:
    dh = conv2d(dpre_y, KernelBank(bank.w, np.zeros(bank.out_channels)), layer.stride)
    g_bank_w = conv2d_kernel_grad(dpre_y, h, layer.stride, bank.kernel_shape)

    dpre_h = dh * tanh_grad(h)
    g_enc_b = dpre_h.sum(axis=(0, 2, 3))
    g_enc_w = conv2d_kernel_grad(x, dpre_h, layer.stride, layer.encoder.kernel_shape)
    return loss, {
        "enc_w": g_enc_w,
        "enc_b": g_enc_b,
        "dec_w": flip_swap(g_bank_w),
        "dec_b": g_dec_b,
    }


def _cae_batch_step(layer: CaeLayer, x: np.ndarray, lr: float) -> float:
    """One forward/backward/SGD step on a minibatch; returns the batch loss."""
    loss, g = cae_grads(layer, x)
    if layer.tied:
        # one update from the summed kernel gradient, then re-derive the decoder
        layer.encoder.w -= lr * (g["enc_w"] + flip_swap(g["dec_w"]))
        layer.encoder.b -= lr * g["enc_b"]
        layer.decoder.b -= lr * g["dec_b"]
        layer.sync_tied()
    else:
        layer.encoder.w -= lr * g["enc_w"]
        layer.encoder.b -= lr * g["enc_b"]
        layer.decoder.w -= lr * g["dec_w"]
        layer.decoder.b -= lr * g["dec_b"]
    return loss


def pretrain_layer(
    layer: CaeLayer,
    inputs,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> list[float]:
    """Minibatch-SGD reconstruction training for one layer.

    Returns the per-epoch mean loss.  Raises
    :class:`~hypercae.errors.NumericDivergenceError` (naming the epoch) if a
    batch loss goes non-finite.
    """
    inputs = as_tensor4(inputs)
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if learning_rate < 0:
        raise ConfigurationError("learning rate must be >= 0")
    rng = np.random.default_rng(seed)
    n = inputs.shape[0]
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            batch = inputs[order[start : start + batch_size]]
            loss = _cae_batch_step(layer, batch, learning_rate)
            if not np.isfinite(loss):
                raise NumericDivergenceError(
                    f"reconstruction loss diverged at epoch {epoch}"
                )
            total += loss * batch.shape[0]
            seen += batch.shape[0]
        history.append(total / seen)
    return history


def pretrain_stack(
    config,
    images,
    *,
    epochs: int | None = None,
    learning_rate: float | None = None,
    batch_size: int | None = None,
    seed: int | None = None,
    tied: bool = False,
) -> tuple[list[CaeLayer], PretrainReport]:
    """Greedy bottom-up pretraining of the configured convolutional stack.

    Layer k+1 trains on the (optionally max-pooled) codes of the already
    trained layer k.  Training knobs default to ``config.training``.
    """
    from .network import validate_config  # deferred: avoids a module cycle

    validate_config(config)
    tr = config.training
    epochs = tr.epochs_pretrain if epochs is None else epochs
    learning_rate = tr.lr_pretrain if learning_rate is None else learning_rate
    batch_size = tr.batch_size if batch_size is None else batch_size
    seed = tr.seed if seed is None else seed

    rng = np.random.default_rng(seed)
    layers = []
    in_maps = 1
    for spec in config.convs:
        layers.append(
            new_cae_layer(rng, in_maps, spec.maps, spec.filter_size, spec.stride, tied)
        )
        in_maps = spec.maps

    report = PretrainReport()
    cur = as_tensor4(images)
    for k, layer in enumerate(layers):
        history = pretrain_layer(
            layer, cur, epochs, learning_rate, batch_size, seed + k
        )
        report.losses.append(history)
        if k + 1 < len(layers):
            codes = cae_encode(layer, cur)
            cur = maxpool2(codes)[0] if config.pool_after_conv else codes
    return layers, report
