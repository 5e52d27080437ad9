import numpy as np
import pytest

from hypercae.cae import pretrain_stack
from hypercae.data import SynthSpec, generate_synthetic, select
from hypercae.network import ConvSpec, HyperSpec, NetworkConfig, TrainingParams, build_network


def tiny_config(**overrides) -> NetworkConfig:
    """Two-scale 16x16 network that trains in a couple of seconds."""
    base = dict(
        input_spatial=(16, 16),
        convs=(ConvSpec(4, 5, 2), ConvSpec(6, 3, 1)),
        pool_after_conv=True,
        hyper=HyperSpec(out_neurons=20, weights=(2, 1)),
        dense=(12,),
        classes=2,
        training=TrainingParams(
            epochs_pretrain=4, epochs_finetune=10, early_stop_patience=10, seed=3
        ),
    )
    base.update(overrides)
    return NetworkConfig(**base)


def tiny_spec(**overrides) -> SynthSpec:
    base = dict(
        image_size=16,
        n_normal=36,
        n_abnormal=9,
        vacuole_count_range=(1, 2),
        vacuole_radius_range=(1, 2),
        grain_scale=4,
        contrast=0.35,
        seed=5,
    )
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(tiny_spec())


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_dataset):
    """(config, CAE stack, model) pretrained on the tiny dataset, untied."""
    config = tiny_config()
    train = select(tiny_dataset, "train")
    stack, report = pretrain_stack(config, train.images)
    model = build_network(config, stack, seed=config.training.seed)
    return config, stack, model, report
