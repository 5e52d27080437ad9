"""Multi-scale convolutional auto-encoder classifier, pure numpy.

The library covers the full pipeline: numeric kernels (`tensor`),
parameterised layers (`layers`), greedy layer-wise auto-encoder pretraining
(`cae`), network assembly / fine-tuning / serialization (`network`),
deconvolutional reconstruction (`deconv`), synthetic data and image I/O
(`data`), evaluation metrics (`metrics`), and a reproducible CLI (`cli`).
"""

from .cae import CaeLayer, cae_decode, cae_encode, cae_loss, pretrain_layer, pretrain_stack
from .data import LabeledDataset, SynthSpec, generate_synthetic, load_dataset, normalize, read_image, rotate4, save_dataset, select, split_folds, write_image
from .deconv import ReconstructionRequest, highfreq_energy, reconstruct_from_layer, render_signed
from .layers import ConvTanh, Dense, Hyper, MaxPool, SoftmaxOut, allocate_blocks
from .metrics import BinaryMetrics, Confusion, binary_metrics, confusion
from .network import (
    ConvSpec,
    HyperSpec,
    Model,
    NetworkConfig,
    TrainingParams,
    build_network,
    desk_scale_config,
    evaluate,
    finetune,
    forward_classify,
    full_scale_config,
    grad_check,
    load_model,
    nll_loss,
    predict,
    reduced_check_config,
    save_model,
    shape_trace,
)
from .tensor import KernelBank, PoolTrace, conv2d, conv2d_transpose, maxpool2, tanh_grad, tanh_map, unpool_absmax

__version__ = "0.1.0"
