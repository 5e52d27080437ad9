import math
import statistics

import numpy as np
import numpy.testing as npt
import pytest

from hypercae.cae import pretrain_stack
from hypercae.data import SynthSpec, generate_synthetic, select
from hypercae.errors import (
    ConfigurationError,
    ModelChecksumError,
    ModelFormatError,
    ModelTruncatedError,
    ModelVersionError,
    NumericDivergenceError,
)
from hypercae.network import (
    ConvSpec,
    HyperSpec,
    NetworkConfig,
    TrainingParams,
    build_network,
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

from conftest import tiny_config

REFERENCE_TRACE = [
    (1, 100, 100),
    (50, 50, 50),
    (50, 25, 25),
    (100, 25, 25),
    (100, 13, 13),
    (150, 13, 13),
    (150, 7, 7),
    900,
    512,
    100,
    50,
    2,
]


def test_default_shape_trace_matches_reference_topology():
    assert shape_trace(full_scale_config()) == REFERENCE_TRACE


def test_full_scale_forward_reproduces_shape_column():
    model = build_network(full_scale_config(), seed=0)
    rng = np.random.default_rng(0)
    probs, tape = model.forward(rng.uniform(-1, 1, (1, 1, 100, 100)))
    conv_shapes = [cache[1].shape for cache in tape["conv"]]
    assert conv_shapes == [(1, 50, 50, 50), (1, 100, 25, 25), (1, 150, 13, 13)]
    pooled_shapes = [t.pooled_shape for t in tape["traces"]]
    assert pooled_shapes == [(1, 50, 25, 25), (1, 100, 13, 13), (1, 150, 7, 7)]
    assert probs.shape == (1, 2)


def test_build_is_deterministic_by_seed():
    a = build_network(tiny_config(), seed=7)
    b = build_network(tiny_config(), seed=7)
    for (_, pa), (_, pb) in zip(a.parameter_arrays(), b.parameter_arrays()):
        npt.assert_array_equal(pa, pb)


def test_mismatched_hyper_weights_rejected():
    config = tiny_config(hyper=HyperSpec(out_neurons=20, weights=(1, 1, 1)))
    with pytest.raises(ConfigurationError):
        build_network(config, seed=0)


def test_invalid_conv_spec_names_scale():
    config = tiny_config(convs=(ConvSpec(4, 5, 2), ConvSpec(6, 4, 1)))
    with pytest.raises(ConfigurationError, match="scale 2"):
        shape_trace(config)


# ---------------------------------------------------------------------------
# softmax / predict / NLL
# ---------------------------------------------------------------------------

def zeroed_model():
    model = build_network(tiny_config(), seed=0)
    for _, arr in model.parameter_arrays():
        arr[...] = 0.0
    return model


def test_zero_output_layer_gives_uniform_probabilities():
    model = zeroed_model()
    probs, _ = forward_classify(model, np.zeros((3, 1, 16, 16)))
    npt.assert_allclose(probs, 0.5, atol=0)


def test_probabilities_sum_to_one_even_for_huge_logits():
    model = build_network(tiny_config(), seed=1)
    rng = np.random.default_rng(1)
    model.out_layer.w[...] = 0.0
    for magnitude in (1.0, 100.0, 1e3):
        model.out_layer.b[...] = rng.uniform(-magnitude, magnitude, size=2)
        probs, _ = forward_classify(model, rng.uniform(-1, 1, (4, 1, 16, 16)))
        npt.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert (probs >= 0).all()


def test_softmax_closed_form_probabilities():
    model = zeroed_model()
    model.out_layer.b[...] = np.array([math.log(3.0), 0.0])
    probs, _ = forward_classify(model, np.zeros((1, 1, 16, 16)))
    npt.assert_allclose(probs, [[0.75, 0.25]], atol=1e-12)


def test_predict_breaks_ties_toward_lower_index():
    model = zeroed_model()
    assert predict(model, np.zeros((2, 1, 16, 16))).tolist() == [0, 0]


def test_predict_agrees_with_argmax_of_probs():
    rng = np.random.default_rng(2)
    model = build_network(tiny_config(), seed=2)
    batch = rng.uniform(-1, 1, (6, 1, 16, 16))
    probs, _ = forward_classify(model, batch)
    npt.assert_array_equal(predict(model, batch), probs.argmax(axis=1))


def test_nll_values():
    assert nll_loss(np.array([[1.0, 0.0]]), [0]) == 0.0
    assert abs(nll_loss(np.array([[0.5, 0.5]]), [1]) - math.log(2.0)) < 1e-12
    with pytest.raises(ConfigurationError):
        nll_loss(np.array([[0.5, 0.5]]), [2])


def test_nll_batch_mean_matches_loop_oracle():
    rng = np.random.default_rng(3)
    raw = rng.uniform(0.05, 1.0, (20, 3))
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 3, 20)
    want = sum(-math.log(probs[i, labels[i]]) for i in range(20)) / 20
    assert abs(nll_loss(probs, labels) - want) < 1e-12


# ---------------------------------------------------------------------------
# end-to-end gradients
# ---------------------------------------------------------------------------

def test_reduced_network_gradients_match_finite_differences():
    model = build_network(reduced_check_config(), seed=42)
    rng = np.random.default_rng(42)
    x = rng.uniform(-1, 1, (2, 1, 24, 24))
    assert grad_check(model, x, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def test_finetune_lr_zero_leaves_parameters_and_log_flat(tiny_dataset):
    train = select(tiny_dataset, "train")
    val = select(tiny_dataset, "val")
    params = TrainingParams(lr_finetune=0.0, epochs_finetune=4, early_stop_patience=10, seed=0)
    model = build_network(tiny_config(), seed=5)
    before = model.snapshot()
    log = finetune(model, train.images, train.labels, val.images, val.labels, params)
    for arr, saved in zip([a for _, a in model.parameter_arrays()], before):
        npt.assert_array_equal(arr, saved)
    assert len({e.val_nll for e in log.epochs}) == 1


def separable_toy_set(rng, n):
    bright = 0.6 + 0.05 * rng.standard_normal((n, 1, 8, 8))
    dark = -0.6 + 0.05 * rng.standard_normal((n, 1, 8, 8))
    images = np.clip(np.concatenate([bright, dark]), -1, 1)
    labels = np.array([0] * n + [1] * n)
    return images, labels


def test_finetune_solves_linearly_separable_toy_set():
    rng = np.random.default_rng(6)
    config = NetworkConfig(
        input_spatial=(8, 8),
        convs=(ConvSpec(2, 3, 2),),
        hyper=HyperSpec(out_neurons=8, weights=(1,)),
        dense=(4,),
        training=TrainingParams(lr_finetune=0.05, epochs_finetune=50, early_stop_patience=50, seed=0),
    )
    model = build_network(config, seed=6)
    train_x, train_y = separable_toy_set(rng, 12)
    val_x, val_y = separable_toy_set(rng, 4)
    finetune(model, train_x, train_y, val_x, val_y)
    _, err, _ = evaluate(model, train_x, train_y)
    assert err == 0.0


def test_finetune_keeps_best_validation_snapshot(tiny_dataset):
    train = select(tiny_dataset, "train")
    val = select(tiny_dataset, "val")
    params = TrainingParams(epochs_finetune=6, early_stop_patience=6, seed=1)
    model = build_network(tiny_config(), seed=7)
    log = finetune(model, train.images, train.labels, val.images, val.labels, params)
    best = min(e.val_nll for e in log.epochs)
    assert log.epochs[log.selected_epoch].val_nll == best
    nll, _, _ = evaluate(model, val.images, val.labels, params.batch_size)
    assert nll == best


def test_finetune_is_bit_reproducible(tiny_dataset):
    train = select(tiny_dataset, "train")
    val = select(tiny_dataset, "val")
    params = TrainingParams(epochs_finetune=3, early_stop_patience=3, seed=2)
    runs = []
    for _ in range(2):
        model = build_network(tiny_config(), seed=8)
        log = finetune(model, train.images, train.labels, val.images, val.labels, params)
        runs.append((model.snapshot(), [(e.train_nll, e.val_nll) for e in log.epochs]))
    assert runs[0][1] == runs[1][1]
    for a, b in zip(runs[0][0], runs[1][0]):
        npt.assert_array_equal(a, b)


def test_finetune_rejects_empty_sets():
    model = build_network(tiny_config(), seed=0)
    x = np.zeros((0, 1, 16, 16))
    with pytest.raises(ConfigurationError):
        finetune(model, x, np.zeros(0, int), x, np.zeros(0, int))


def test_finetune_divergence_names_epoch(tiny_dataset):
    train = select(tiny_dataset, "train")
    model = build_network(tiny_config(), seed=0)
    bad = train.images.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericDivergenceError, match="epoch 0"):
        finetune(model, bad, train.labels, train.images, train.labels)


def test_pretrained_init_reaches_threshold_no_later_than_random():
    # directional property mirroring the two-stage design: median epochs to
    # reach a fixed validation NLL over 5 seeds
    spec = SynthSpec(image_size=32, n_normal=160, n_abnormal=40, vacuole_count_range=(1, 3),
                     vacuole_radius_range=(2, 4), grain_scale=8, contrast=0.3, seed=11)
    ds = generate_synthetic(spec)
    train, val = select(ds, "train"), select(ds, "val")
    threshold = 0.6
    reach = {"pre": [], "rand": []}
    for seed in range(5):
        params = TrainingParams(epochs_pretrain=6, epochs_finetune=20, early_stop_patience=20, seed=seed)
        config = NetworkConfig(
            input_spatial=(32, 32),
            convs=(ConvSpec(8, 7, 2), ConvSpec(16, 5, 1), ConvSpec(24, 3, 1)),
            hyper=HyperSpec(out_neurons=90),
            dense=(64, 32, 16),
            training=params,
        )
        stack, _ = pretrain_stack(config, train.images, seed=seed)
        for name, pre in (("pre", stack), ("rand", None)):
            model = build_network(config, pre, seed=seed)
            log = finetune(model, train.images, train.labels, val.images, val.labels, params)
            vals = [e.val_nll for e in log.epochs]
            reach[name].append(next((i for i, v in enumerate(vals) if v <= threshold), 999))
    assert statistics.median(reach["pre"]) <= statistics.median(reach["rand"])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_save_load_round_trip_is_bit_identical(tmp_path, tiny_pretrained):
    _, _, model, _ = tiny_pretrained
    path = tmp_path / "model.hypn"
    save_model(model, path)
    loaded = load_model(path)
    for (name_a, a), (name_b, b) in zip(model.parameter_arrays(), loaded.parameter_arrays()):
        assert name_a == name_b
        npt.assert_array_equal(a, b)
    assert loaded.config == model.config
    assert loaded.provenance == model.provenance
    assert loaded.decoders is not None


def test_corrupted_byte_raises_checksum_error(tmp_path):
    model = build_network(tiny_config(), seed=3)
    path = tmp_path / "model.hypn"
    save_model(model, path)
    blob = bytearray(path.read_bytes())
    mid = len(blob) // 2
    blob[mid] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelChecksumError):
        load_model(path)


def test_truncated_file_raises_truncation_error(tmp_path):
    model = build_network(tiny_config(), seed=3)
    path = tmp_path / "model.hypn"
    save_model(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ModelTruncatedError):
        load_model(path)


def test_version_and_magic_errors_are_distinct(tmp_path):
    model = build_network(tiny_config(), seed=3)
    path = tmp_path / "model.hypn"
    save_model(model, path)
    blob = bytearray(path.read_bytes())

    wrong_version = bytearray(blob)
    wrong_version[4] = 99
    path.write_bytes(bytes(wrong_version))
    with pytest.raises(ModelVersionError):
        load_model(path)

    wrong_magic = bytearray(blob)
    wrong_magic[:4] = b"XXXX"
    path.write_bytes(bytes(wrong_magic))
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_loaded_multiclass_model_produces_matching_probs(tmp_path):
    config = tiny_config(classes=5)
    model = build_network(config, seed=4)
    path = tmp_path / "five.hypn"
    save_model(model, path)
    loaded = load_model(path)
    probs, _ = forward_classify(loaded, np.zeros((2, 1, 16, 16)))
    assert probs.shape == (2, 5)
    npt.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
