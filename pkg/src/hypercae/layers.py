"""Parameterised layers with explicit forward/backward passes.

Each layer exposes the same informal protocol:

* ``forward(x) -> (output, cache)``
* ``backward(cache, grad_out) -> (grad_in, param_grads)``
* ``parameters() -> dict[str, np.ndarray]`` (live references, mutated by SGD)

``param_grads`` is a dict with the same keys as ``parameters()``.  Layers are
deterministic pure functions of (parameters, input); nothing here owns an RNG.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    KernelBank,
    as_tensor4,
    conv2d,
    conv2d_kernel_grad,
    conv2d_transpose,
    maxpool2,
    maxpool2_backward,
    tanh_grad,
)

__all__ = [
    "ConvTanh",
    "MaxPool",
    "Hyper",
    "Dense",
    "SoftmaxOut",
    "allocate_blocks",
    "glorot_uniform",
    "fd_max_rel_error",
    "layer_grad_check",
]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init on [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def allocate_blocks(out_neurons: int, weights) -> list[int]:
    """Split ``out_neurons`` across taps proportionally to integer weights.

    Largest-remainder rounding, so the blocks always sum to ``out_neurons``
    exactly; remainder ties are broken toward the lower tap index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ConfigurationError("hyperlayer weights must be a non-empty sequence")
    if np.any(w < 1) or np.any(w != np.floor(w)):
        raise ConfigurationError(f"hyperlayer weights must be integers >= 1, got {weights}")
    quota = out_neurons * w / w.sum()
    base = np.floor(quota).astype(int)
    frac = quota - base
    order = np.argsort(-frac, kind="stable")
    leftover = out_neurons - int(base.sum())
    base[order[:leftover]] += 1
    return [int(v) for v in base]


class ConvTanh:
    """Convolution (cross-correlation) followed by elementwise tanh."""

    def __init__(self, kernels: KernelBank, stride: int = 1):
        self.kernels = kernels
        self.stride = stride

    def parameters(self):
        return {"w": self.kernels.w, "b": self.kernels.b}

    def forward(self, x):
        x = as_tensor4(x)
        y = np.tanh(conv2d(x, self.kernels, self.stride))
        return y, (x, y)

    def backward(self, cache, grad_out):
        x, y = cache
        dpre = grad_out * tanh_grad(y)
        gw = conv2d_kernel_grad(x, dpre, self.stride, self.kernels.kernel_shape)
        gb = dpre.sum(axis=(0, 2, 3))
        gx = conv2d_transpose(dpre, self.kernels, self.stride, (x.shape[2], x.shape[3]))
        return gx, {"w": gw, "b": gb}


class MaxPool:
    """2x2 ceil-mode max pooling; parameter free."""

    def parameters(self):
        return {}

    def forward(self, x):
        pooled, trace = maxpool2(x)
        return pooled, trace

    def backward(self, cache, grad_out):
        if cache is None:
            raise ConfigurationError("max-pool backward requires the forward trace")
        return maxpool2_backward(cache, grad_out), {}


class Hyper:
    """Multi-scale fusion layer.

    Consumes one feature-map tensor per tapped convolutional scale, flattens
    each, pushes it through its own dense block with tanh, and concatenates
    the block outputs.  Block widths are fixed at construction (see
    :func:`allocate_blocks`).
    """

    def __init__(self, blocks: list[tuple[np.ndarray, np.ndarray]]):
        self.blocks = blocks  # list of (matrix (n_i, flat_i), bias (n_i,))

    @property
    def block_sizes(self) -> list[int]:
        return [m.shape[0] for m, _ in self.blocks]

    @property
    def out_neurons(self) -> int:
        return sum(self.block_sizes)

    def parameters(self):
        params = {}
        for i, (m, b) in enumerate(self.blocks):
            params[f"w{i}"] = m
            params[f"b{i}"] = b
        return params

    def forward(self, taps):
        if len(taps) != len(self.blocks):
            raise ConfigurationError(
                f"hyperlayer got {len(taps)} taps, configured for {len(self.blocks)}"
            )
        batch = taps[0].shape[0]
        flats, outs, shapes = [], [], []
        for tap, (m, b) in zip(taps, self.blocks):
            flat = tap.reshape(batch, -1)
            if flat.shape[1] != m.shape[1]:
                raise ConfigurationError(
                    f"tap of {flat.shape[1]} features does not match block width {m.shape[1]}"
                )
            outs.append(np.tanh(flat @ m.T + b))
            flats.append(flat)
            shapes.append(tap.shape)
        return np.concatenate(outs, axis=1), (shapes, flats, outs)

    def backward(self, cache, grad_out):
        shapes, flats, outs = cache
        grads = {}
        grad_taps = []
        start = 0
        for i, (m, _) in enumerate(self.blocks):
            n = m.shape[0]
            dpre = grad_out[:, start : start + n] * tanh_grad(outs[i])
            grads[f"w{i}"] = dpre.T @ flats[i]
            grads[f"b{i}"] = dpre.sum(axis=0)
            grad_taps.append((dpre @ m).reshape(shapes[i]))
            start += n
        return grad_taps, grads


class Dense:
    """Fully connected layer with tanh; flattens any higher-rank input."""

    def __init__(self, matrix: np.ndarray, bias: np.ndarray):
        if matrix.ndim != 2 or bias.shape != (matrix.shape[0],):
            raise ConfigurationError("dense layer needs a 2-D matrix and a matching bias")
        self.w = matrix
        self.b = bias

    def parameters(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        shape = x.shape
        flat = x.reshape(shape[0], -1)
        if flat.shape[1] != self.w.shape[1]:
            raise ConfigurationError(
                f"dense input width {flat.shape[1]} does not match matrix {self.w.shape}"
            )
        y = np.tanh(flat @ self.w.T + self.b)
        return y, (shape, flat, y)

    def backward(self, cache, grad_out):
        shape, flat, y = cache
        dpre = grad_out * tanh_grad(y)
        gw = dpre.T @ flat
        gb = dpre.sum(axis=0)
        gx = (dpre @ self.w).reshape(shape)
        return gx, {"w": gw, "b": gb}


class SoftmaxOut:
    """Linear layer followed by a numerically stabilised softmax."""

    def __init__(self, matrix: np.ndarray, bias: np.ndarray):
        if matrix.ndim != 2 or bias.shape != (matrix.shape[0],):
            raise ConfigurationError("output layer needs a 2-D matrix and a matching bias")
        self.w = matrix
        self.b = bias

    def parameters(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.w.shape[1]:
            raise ConfigurationError(
                f"output input width {flat.shape[1]} does not match matrix {self.w.shape}"
            )
        logits = flat @ self.w.T + self.b
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return probs, (flat, probs)

    def backward(self, cache, grad_out):
        flat, probs = cache
        # Softmax Jacobian-vector product: dz = p * (g - <g, p>)
        inner = (grad_out * probs).sum(axis=1, keepdims=True)
        dlogits = probs * (grad_out - inner)
        gw = dlogits.T @ flat
        gb = dlogits.sum(axis=0)
        gx = dlogits @ self.w
        return gx, {"w": gw, "b": gb}


class NumericError(ArithmeticError):
    """A probe loss evaluated to NaN or infinity during gradient checking."""


def fd_max_rel_error(
    loss_fn,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float,
    *,
    sample_threshold: int = 10_000,
    sample_size: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic parameter gradients against central finite differences.

    Perturbs every entry of every array in ``params`` in place (or a random
    sample of at least ``sample_size`` entries when an array exceeds
    ``sample_threshold``), re-evaluating ``loss_fn`` twice per entry.  Returns
    ``max |a - n| / max(|a|, |n|, 1e-12)`` over all checked entries.
    """
    if eps <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        grad = analytic[name]
        if arr.size <= sample_threshold:
            indices = range(arr.size)
        else:
            indices = rng.choice(arr.size, size=max(sample_size, 200), replace=False)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite probe loss while checking {name}[{i}]")
            numeric = (lp - lm) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


def layer_grad_check(layer, x, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative analytic-vs-numeric gradient error for one layer.

    The probe loss is ``sum(output * R)`` for a fixed random ``R``, which makes
    the analytic gradient a single backward pass with ``grad_out = R``.
    Parameter-free layers return 0.0.
    """
    params = layer.parameters()
    if not params:
        return 0.0
    rng = np.random.default_rng(seed)
    out, cache = layer.forward(x)
    probe = rng.standard_normal(out.shape)
    _, analytic = layer.backward(cache, probe)

    def loss():
        y, _ = layer.forward(x)
        return float((y * probe).sum())

    return fd_max_rel_error(loss, params, analytic, eps, seed=seed)
