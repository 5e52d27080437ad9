"""Dense 4-axis tensors and the numeric kernels every layer is built from.

Images, feature maps, and gradients all travel as plain ``numpy`` arrays of
shape ``(batch, channels, rows, cols)``, C-ordered, double precision.  The
functions here fix the library's convolution conventions in one place:

* :func:`conv2d` computes cross-correlation (no kernel flip) with zero
  padding sized so a stride-1 output matches its input spatially.
* A stride subsamples the stride-1 output grid: output cell ``(i, j)`` is
  centred on input pixel ``(stride*i, stride*j)``, so each output side is
  ``ceil(side / stride)``.
* :func:`conv2d_transpose` is the exact adjoint of the bias-free part of
  :func:`conv2d`: ``<conv2d(a, k), b> == <a, conv2d_transpose(b, k)>``.
* :func:`maxpool2` pools 2x2 in ceil mode; windows on odd edges are
  truncated rather than dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError

__all__ = [
    "KernelBank",
    "PoolTrace",
    "as_tensor4",
    "conv2d",
    "conv2d_transpose",
    "conv2d_kernel_grad",
    "maxpool2",
    "maxpool2_backward",
    "unpool_absmax",
    "unpool_fill",
    "tanh_map",
    "tanh_grad",
]


def as_tensor4(x) -> np.ndarray:
    """Coerce ``x`` to a float64 ``(batch, channels, rows, cols)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ConfigurationError(f"expected a 4-axis tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ConfigurationError(f"all tensor dims must be >= 1, got {arr.shape}")
    return arr


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class KernelBank:
    """A stack of convolution kernels plus one bias per output channel.

    ``w`` has shape ``(out_channels, in_channels, k_rows, k_cols)`` with odd
    kernel sides (required for centred same-padding); ``b`` has length
    ``out_channels``.
    """

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 4:
            raise ConfigurationError(f"kernel bank must be 4-axis, got shape {self.w.shape}")
        out_ch, _, kh, kw = self.w.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"kernel sides must be odd, got {kh}x{kw}")
        if self.b.shape != (out_ch,):
            raise ConfigurationError(
                f"bias length {self.b.shape} does not match {out_ch} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]

    @property
    def kernel_shape(self) -> tuple[int, int]:
        return self.w.shape[2], self.w.shape[3]


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")


def conv2d(x, kernels: KernelBank, stride: int = 1) -> np.ndarray:
    """Cross-correlate ``x`` with a kernel bank, zero-padded, bias added.

    Output shape is ``(batch, out_channels, ceil(rows/stride), ceil(cols/stride))``;
    with stride 1 the spatial dims equal the input's.
    """
    x = as_tensor4(x)
    _check_stride(stride)
    if x.shape[1] != kernels.in_channels:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels, kernel bank expects {kernels.in_channels}"
        )
    kh, kw = kernels.kernel_shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, H, W, kh, kw)
    win = win[:, :, ::stride, ::stride]
    out = np.tensordot(win, kernels.w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = np.moveaxis(out, 3, 1)
    out = out + kernels.b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_transpose(
    grad_or_features, kernels: KernelBank, stride: int, out_spatial: tuple[int, int]
) -> np.ndarray:
    """Exact adjoint of the linear (bias-free) part of :func:`conv2d`.

    Maps a tensor with ``kernels.out_channels`` channels back to one with
    ``kernels.in_channels`` channels and spatial size ``out_spatial``.  The
    bank's bias is not used.
    """
    g = as_tensor4(grad_or_features)
    _check_stride(stride)
    if g.shape[1] != kernels.out_channels:
        raise ConfigurationError(
            f"input has {g.shape[1]} channels, kernel bank produces {kernels.out_channels}"
        )
    rows, cols = out_spatial
    ho, wo = g.shape[2], g.shape[3]
    if _ceil_div(rows, stride) != ho or _ceil_div(cols, stride) != wo:
        raise ConfigurationError(
            f"out_spatial {out_spatial} is inconsistent with input spatial "
            f"({ho}, {wo}) at stride {stride}"
        )
    kh, kw = kernels.kernel_shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    acc = np.zeros((g.shape[0], kernels.in_channels, rows + 2 * ph, cols + 2 * pw))
    contrib = np.tensordot(g, kernels.w, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    contrib = np.moveaxis(contrib, 3, 1)  # (B, C, Ho, Wo, kh, kw)
    for u in range(kh):
        for v in range(kw):
            acc[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += contrib[
                ..., u, v
            ]
    return np.ascontiguousarray(acc[:, :, ph : ph + rows, pw : pw + cols])


def conv2d_kernel_grad(x, grad_out, stride: int, kernel_shape: tuple[int, int]) -> np.ndarray:
    """Gradient of a :func:`conv2d` output w.r.t. the kernel weights.

    ``x`` is the forward input, ``grad_out`` the loss gradient at the forward
    output; the result has bank shape ``(out_channels, in_channels, kh, kw)``.
    """
    x = as_tensor4(x)
    g = as_tensor4(grad_out)
    _check_stride(stride)
    kh, kw = kernel_shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, Ho, Wo, kh, kw); g: (B, O, Ho, Wo) -> (O, C, kh, kw)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


@dataclass
class PoolTrace:
    """Record of one 2x2 max-pooling pass, consumed by backprop and unpooling.

    ``pre_pool`` is the tensor that was pooled; ``row_offset``/``col_offset``
    give, per output cell, the position of the window maximum inside its
    (possibly edge-truncated) window, each in {0, 1}.
    """

    pre_pool: np.ndarray
    row_offset: np.ndarray
    col_offset: np.ndarray

    @property
    def pooled_shape(self) -> tuple[int, int, int, int]:
        b, c, h, w = self.pre_pool.shape
        return b, c, _ceil_div(h, 2), _ceil_div(w, 2)


def _pool_windows(x: np.ndarray, pad_value: float) -> np.ndarray:
    """Reshape to (B, C, Ho, Wo, 4) windows, padding odd edges with ``pad_value``."""
    b, c, h, w = x.shape
    ho, wo = _ceil_div(h, 2), _ceil_div(w, 2)
    xp = np.pad(
        x,
        ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)),
        constant_values=pad_value,
    )
    win = xp.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(b, c, ho, wo, 4)


def maxpool2(x) -> tuple[np.ndarray, PoolTrace]:
    """2x2 max pooling in ceil mode.

    Returns the pooled tensor of spatial shape ``(ceil(rows/2), ceil(cols/2))``
    and a :class:`PoolTrace`.  Argmax ties go to the first cell in row-major
    window order; edge windows are truncated, never padded with real values.
    """
    x = as_tensor4(x)
    flat = _pool_windows(x, -np.inf)
    idx = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    trace = PoolTrace(
        pre_pool=x.copy(),
        row_offset=idx // 2,
        col_offset=idx % 2,
    )
    return np.ascontiguousarray(pooled), trace


def maxpool2_backward(trace: PoolTrace, grad_out) -> np.ndarray:
    """Route the pooled gradient back to each window's recorded argmax cell."""
    g = as_tensor4(grad_out)
    b, c, ho, wo = trace.pooled_shape
    if g.shape != (b, c, ho, wo):
        raise ConfigurationError(f"gradient shape {g.shape} does not match pooled {(b, c, ho, wo)}")
    gx = np.zeros_like(trace.pre_pool)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    rows = 2 * np.arange(ho)[None, None, :, None] + trace.row_offset
    cols = 2 * np.arange(wo)[None, None, None, :] + trace.col_offset
    gx[bi, ci, rows, cols] = g
    return gx


def unpool_absmax(trace: PoolTrace) -> np.ndarray:
    """Fill every pool window with the window's absolute-maximum value.

    The output has the pre-pool dims; the sign of the winning value is kept.
    """
    x = trace.pre_pool
    b, c, h, w = x.shape
    mags = _pool_windows(np.abs(x), -1.0)
    vals = _pool_windows(x, 0.0)
    idx = mags.argmax(axis=-1)
    winners = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]
    return unpool_fill(winners, h, w)


def unpool_fill(values, out_rows: int, out_cols: int) -> np.ndarray:
    """Broadcast one value per pool window over its 2x2 neighbourhood.

    Used on the reconstruction path to upsample decoded feature maps; edge
    windows are cropped to the requested output size.
    """
    v = as_tensor4(values)
    ho, wo = v.shape[2], v.shape[3]
    if _ceil_div(out_rows, 2) != ho or _ceil_div(out_cols, 2) != wo:
        raise ConfigurationError(
            f"cannot fill {ho}x{wo} windows to {out_rows}x{out_cols} output"
        )
    out = np.repeat(np.repeat(v, 2, axis=2), 2, axis=3)
    return np.ascontiguousarray(out[:, :, :out_rows, :out_cols])


def tanh_map(x) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(x)


def tanh_grad(y) -> np.ndarray:
    """Derivative of tanh computed from the activation output: 1 - y**2."""
    y = np.asarray(y)
    return 1.0 - y * y
