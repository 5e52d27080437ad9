"""Deconvolutional reconstruction of inputs from convolutional-scale features.

A reconstruction runs the forward pass up to the requested scale (recording
pool traces), then walks back down: at the starting scale the pooled features
are upsampled by filling each pool window with the window's absolute-maximum
forward value; at every scale below, the decoded values themselves are
broadcast over their windows.  Each upsample is followed by a transposed
convolution and tanh, so the result lands back in input space with values in
[-1, 1].

Two weight sources are supported: ``finetuned_tied`` decodes with the current
encoder kernels (their exact adjoint), while ``pretrained_decoder`` uses the
decoder banks retained from unsupervised pretraining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cae import decoder_transpose_bank
from .errors import ConfigurationError
from .network import Model
from .tensor import KernelBank, as_tensor4, conv2d_transpose, maxpool2, unpool_absmax, unpool_fill

__all__ = [
    "ReconstructionRequest",
    "reconstruct_from_layer",
    "render_signed",
    "highfreq_energy",
]

WEIGHT_SOURCES = ("finetuned_tied", "pretrained_decoder")


@dataclass
class ReconstructionRequest:
    model: Model
    image: np.ndarray  # single sample, (1, 1, rows, cols), values in [-1, 1]
    from_layer: int  # 1-based convolutional scale index
    weight_source: str = "finetuned_tied"


def _decode_params(model: Model, scale: int, weight_source: str):
    """(transpose bank, bias) used to decode features at ``scale`` (0-based)."""
    if weight_source == "finetuned_tied":
        enc = model.conv_layers[scale].kernels
        bank = KernelBank(enc.w, np.zeros(enc.out_channels))
        if model.decoders is not None:
            bias = model.decoders[scale].b
        else:
            bias = np.zeros(enc.in_channels)
        return bank, bias
    if weight_source == "pretrained_decoder":
        if model.decoders is None:
            raise ConfigurationError(
                "model has no stored pretraining decoders; use weight_source='finetuned_tied'"
            )
        dec = model.decoders[scale]
        return decoder_transpose_bank(dec), dec.b
    raise ConfigurationError(f"unknown weight source {weight_source!r}")


def reconstruct_from_layer(req: ReconstructionRequest) -> np.ndarray:
    """Reconstruct the input image from the features of one conv scale."""
    model = req.model
    img = as_tensor4(req.image)
    n_scales = len(model.conv_layers)
    if not 1 <= req.from_layer <= n_scales:
        raise ConfigurationError(
            f"from_layer must be in 1..{n_scales}, got {req.from_layer}"
        )
    if img.shape[0] != 1 or img.shape[1] != 1:
        raise ConfigurationError(f"expected a single one-channel sample, got {img.shape}")
    if np.abs(img).max() > 1.0 + 1e-9:
        raise ConfigurationError("reconstruction input must be normalized to [-1, 1]")
    if req.weight_source not in WEIGHT_SOURCES:
        raise ConfigurationError(f"unknown weight source {req.weight_source!r}")

    # Forward to the requested scale, recording what the descent needs.
    cur = img
    features, traces, in_spatials = [], [], []
    for conv in model.conv_layers[: req.from_layer]:
        in_spatials.append((cur.shape[2], cur.shape[3]))
        h, _ = conv.forward(cur)
        features.append(h)
        if model.config.pool_after_conv:
            pooled, trace = maxpool2(h)
            traces.append(trace)
            cur = pooled
        else:
            traces.append(None)
            cur = h

    pooled_taps = model.config.pool_after_conv and model.config.hyper.tap_point == "post_pool"
    top = req.from_layer - 1
    z = cur if pooled_taps else features[top]
    for k in range(top, -1, -1):
        if model.config.pool_after_conv:
            rows, cols = features[k].shape[2], features[k].shape[3]
            if k == top:
                if pooled_taps:
                    z = unpool_absmax(traces[k])
            else:
                z = unpool_fill(z, rows, cols)
        bank, bias = _decode_params(model, k, req.weight_source)
        stride = model.conv_layers[k].stride
        z = np.tanh(
            conv2d_transpose(z, bank, stride, in_spatials[k]) + bias.reshape(1, -1, 1, 1)
        )
    return z


def render_signed(recon) -> np.ndarray:
    """Render a single-channel tensor as RGB: negatives red, positives green.

    Channel intensity is round(255 * min(|v|, 1)) with round-half-to-even;
    zero maps to black.  Returns a ``(rows, cols, 3)`` uint8 buffer.
    """
    t = as_tensor4(recon)
    if t.shape[0] != 1 or t.shape[1] != 1:
        raise ConfigurationError(f"expected a single one-channel sample, got {t.shape}")
    v = t[0, 0]
    mag = np.rint(255.0 * np.minimum(np.abs(v), 1.0)).astype(np.uint8)
    rgb = np.zeros(v.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.where(v < 0, mag, 0)
    rgb[..., 1] = np.where(v > 0, mag, 0)
    return rgb


def highfreq_energy(image) -> float:
    """Mean squared 5-point Laplacian over the interior; a sharpness proxy."""
    t = as_tensor4(image)
    v = t[0, 0]
    if v.shape[0] < 3 or v.shape[1] < 3:
        raise ConfigurationError("need at least a 3x3 image for the Laplacian")
    lap = (
        v[:-2, 1:-1] + v[2:, 1:-1] + v[1:-1, :-2] + v[1:-1, 2:] - 4.0 * v[1:-1, 1:-1]
    )
    return float(np.mean(lap * lap))
