#!/usr/bin/env python3
"""Layer-wise auto-encoder pretraining, then deconvolutional reconstruction.

Generates a small synthetic texture dataset, pretrains the three-scale
auto-encoder stack, and writes each scale's reconstruction of one image as
PGM plus the signed red/green render as PPM (negative values red, positive
green).  Outputs land in demos/out/.
"""

from pathlib import Path

import numpy as np

from hypercae.cae import pretrain_stack
from hypercae.data import SynthSpec, generate_synthetic, select, write_image, write_ppm
from hypercae.deconv import ReconstructionRequest, highfreq_energy, reconstruct_from_layer, render_signed
from hypercae.network import ConvSpec, HyperSpec, NetworkConfig, TrainingParams, build_network

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

spec = SynthSpec(image_size=32, n_normal=150, n_abnormal=40, grain_scale=3, contrast=0.45, seed=1)
ds = generate_synthetic(spec)
train = select(ds, "train")
print(f"dataset: {len(ds)} patches, training on {len(train)}")

config = NetworkConfig(
    input_spatial=(32, 32),
    convs=(ConvSpec(8, 7, 1), ConvSpec(16, 5, 1), ConvSpec(24, 3, 1)),
    hyper=HyperSpec(out_neurons=90),
    dense=(64, 32, 16),
    training=TrainingParams(epochs_pretrain=15, seed=1),
)

stack, report = pretrain_stack(config, train.images)
for k, history in enumerate(report.losses):
    print(f"scale {k + 1}: reconstruction MSE {history[0]:.4f} -> {history[-1]:.4f}")

model = build_network(config, stack, seed=1)

image = select(ds, "test").images[:1]
write_image(image, out_dir / "original.pgm")
for layer in (1, 2, 3):
    recon = reconstruct_from_layer(
        ReconstructionRequest(model, image, layer, "pretrained_decoder")
    )
    write_image(recon, out_dir / f"recon_layer{layer}.pgm")
    write_ppm(out_dir / f"recon_layer{layer}_signed.ppm", render_signed(recon))
    print(f"scale {layer}: high-frequency energy {highfreq_energy(recon):.4f}")

print(f"wrote originals and reconstructions to {out_dir}/")
print("deeper scales lose resolution to pooling, so their reconstructions are smoother")
