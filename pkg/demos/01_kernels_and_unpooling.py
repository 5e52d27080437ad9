#!/usr/bin/env python3
"""A tour of the numeric kernels: convolution, its adjoint, pooling, unpooling.

Everything downstream (auto-encoders, the classifier, the reconstruction
path) is built from the handful of operations shown here.
"""

import numpy as np

from hypercae.tensor import (
    KernelBank,
    conv2d,
    conv2d_transpose,
    maxpool2,
    unpool_absmax,
)

rng = np.random.default_rng(0)

# --- same-padded cross-correlation ----------------------------------------
# A 3x3 averaging kernel over a 1..16 grid: stride 1 keeps the spatial size.
x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
bank = KernelBank(np.full((1, 1, 3, 3), 1.0 / 9.0), np.zeros(1))
y = conv2d(x, bank, stride=1)
print("input:\n", x[0, 0])
print("3x3 box average (same padding):\n", np.round(y[0, 0], 2))

# Stride 2 subsamples the same grid: output side = ceil(side / 2).
y2 = conv2d(x, bank, stride=2)
print("stride-2 output shape:", y2.shape)

# --- the transpose is an exact adjoint -------------------------------------
# <conv(a), b> == <a, conv_transpose(b)> holds to machine precision, which is
# what makes the same routine serve as both decoder and backprop primitive.
a = rng.standard_normal((1, 2, 6, 6))
bank = KernelBank(rng.standard_normal((3, 2, 5, 5)), np.zeros(3))
fwd = conv2d(a, bank, stride=2)
b = rng.standard_normal(fwd.shape)
lhs = (fwd * b).sum()
rhs = (a * conv2d_transpose(b, bank, stride=2, out_spatial=(6, 6))).sum()
print(f"adjoint identity: {lhs:.12f} == {rhs:.12f}")

# --- ceil-mode pooling and abs-max unpooling --------------------------------
# A 5x5 input pools to 3x3 (edge windows are truncated).  Unpooling fills
# each window with the value of largest magnitude, keeping its sign.
x = rng.standard_normal((1, 1, 5, 5)).round(2)
pooled, trace = maxpool2(x)
print("pre-pool:\n", x[0, 0])
print("pooled (ceil mode):\n", pooled[0, 0])
print("abs-max fill:\n", unpool_absmax(trace)[0, 0])
