"""Full network assembly, supervised fine-tuning, and model serialization.

The architecture is a chain of convolution+tanh scales (each optionally
max-pooled), a multi-scale hyperlayer fusing feature maps tapped from every
scale, a stack of tanh dense layers, and a softmax output trained under
negative log-likelihood.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    ModelChecksumError,
    ModelFormatError,
    ModelTruncatedError,
    ModelVersionError,
    NumericDivergenceError,
)
from .layers import ConvTanh, Dense, Hyper, SoftmaxOut, allocate_blocks, fd_max_rel_error, glorot_uniform, layer_grad_check
from .tensor import KernelBank, as_tensor4, maxpool2, maxpool2_backward

__all__ = [
    "ConvSpec",
    "HyperSpec",
    "TrainingParams",
    "NetworkConfig",
    "Provenance",
    "Model",
    "TrainLog",
    "full_scale_config",
    "desk_scale_config",
    "reduced_check_config",
    "validate_config",
    "shape_trace",
    "tap_shapes",
    "build_network",
    "forward_classify",
    "predict",
    "nll_loss",
    "nll_grad",
    "evaluate",
    "finetune",
    "grad_check",
    "network_grad_report",
    "save_model",
    "load_model",
]

MODEL_MAGIC = b"HYPN"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    maps: int
    filter_size: int
    stride: int = 1


@dataclass
class HyperSpec:
    out_neurons: int = 900
    weights: tuple[int, ...] = (3, 2, 1)
    tap_point: str = "post_pool"  # or "pre_pool"
    fusion: str = "all"  # "all" fuses every scale; "top" reads only the last one


@dataclass
class TrainingParams:
    lr_pretrain: float = 0.05
    lr_finetune: float = 0.01
    batch_size: int = 32
    epochs_pretrain: int = 20
    epochs_finetune: int = 100
    seed: int = 42
    early_stop_patience: int = 10


@dataclass
class NetworkConfig:
    """Declarative description of the layer stack plus training knobs.

    The default instance is the full-scale reference topology: 100x100 input,
    conv scales (50 maps, 13x13, stride 2), (100, 9x9), (150, 3x3), each
    max-pooled, a 900-neuron hyperlayer weighted 3:2:1, dense widths
    (512, 100, 50), and 2 output classes.
    """

    input_spatial: tuple[int, int] = (100, 100)
    convs: tuple[ConvSpec, ...] = (
        ConvSpec(50, 13, 2),
        ConvSpec(100, 9, 1),
        ConvSpec(150, 3, 1),
    )
    pool_after_conv: bool = True
    hyper: HyperSpec = field(default_factory=HyperSpec)
    dense: tuple[int, ...] = (512, 100, 50)
    classes: int = 2
    training: TrainingParams = field(default_factory=TrainingParams)


def full_scale_config() -> NetworkConfig:
    """The reference full-size topology (100x100 inputs)."""
    return NetworkConfig()


def desk_scale_config() -> NetworkConfig:
    """Proportionally shrunk topology that trains in minutes on a laptop."""
    return NetworkConfig(
        input_spatial=(32, 32),
        convs=(ConvSpec(8, 7, 2), ConvSpec(16, 5, 1), ConvSpec(24, 3, 1)),
        hyper=HyperSpec(out_neurons=90),
        dense=(64, 32, 16),
    )


def reduced_check_config() -> NetworkConfig:
    """Small instance used for finite-difference gradient verification."""
    return NetworkConfig(
        input_spatial=(24, 24),
        convs=(ConvSpec(4, 5, 2), ConvSpec(6, 3, 1), ConvSpec(8, 3, 1)),
        hyper=HyperSpec(out_neurons=30),
        dense=(16, 8),
    )


def validate_config(config: NetworkConfig) -> None:
    if config.classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {config.classes}")
    if not config.convs:
        raise ConfigurationError("at least one convolutional scale is required")
    for i, spec in enumerate(config.convs):
        if spec.filter_size % 2 == 0:
            raise ConfigurationError(f"conv scale {i + 1}: filter size must be odd")
        if spec.stride not in (1, 2):
            raise ConfigurationError(f"conv scale {i + 1}: stride must be 1 or 2")
        if spec.maps < 1:
            raise ConfigurationError(f"conv scale {i + 1}: maps must be >= 1")
    if config.hyper.tap_point not in ("post_pool", "pre_pool"):
        raise ConfigurationError(f"unknown tap point {config.hyper.tap_point!r}")
    if config.hyper.fusion not in ("all", "top"):
        raise ConfigurationError(f"unknown fusion mode {config.hyper.fusion!r}")
    if config.hyper.fusion == "all" and len(config.hyper.weights) != len(config.convs):
        raise ConfigurationError(
            f"{len(config.hyper.weights)} hyperlayer weights for {len(config.convs)} conv scales"
        )
    allocate_blocks(config.hyper.out_neurons, config.hyper.weights)  # validates weights


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def shape_trace(config: NetworkConfig) -> list:
    """Per-layer output shapes: (maps, rows, cols) tuples, then neuron counts."""
    validate_config(config)
    rows, cols = config.input_spatial
    trace: list = [(1, rows, cols)]
    for spec in config.convs:
        rows, cols = _ceil_div(rows, spec.stride), _ceil_div(cols, spec.stride)
        trace.append((spec.maps, rows, cols))
        if config.pool_after_conv:
            rows, cols = _ceil_div(rows, 2), _ceil_div(cols, 2)
            trace.append((spec.maps, rows, cols))
        if min(rows, cols) < 1:
            raise ConfigurationError(f"spatial size collapsed at conv scale {spec}")
    trace.append(config.hyper.out_neurons)
    trace.extend(config.dense)
    trace.append(config.classes)
    return trace


def tap_shapes(config: NetworkConfig) -> list[tuple[int, int, int]]:
    """Shapes of the feature maps the hyperlayer reads, in scale order."""
    rows, cols = config.input_spatial
    shapes = []
    for spec in config.convs:
        rows, cols = _ceil_div(rows, spec.stride), _ceil_div(cols, spec.stride)
        pre = (spec.maps, rows, cols)
        if config.pool_after_conv:
            rows, cols = _ceil_div(rows, 2), _ceil_div(cols, 2)
        shapes.append(pre if config.hyper.tap_point == "pre_pool" else (spec.maps, rows, cols))
    if config.hyper.fusion == "top":
        return [shapes[-1]]
    return shapes


@dataclass
class Provenance:
    pretrained: bool = False
    finetuned: bool = False
    seed: int = 0


class Model:
    """Ordered parameterised layers plus config and provenance."""

    def __init__(
        self,
        config: NetworkConfig,
        conv_layers: list[ConvTanh],
        hyper: Hyper,
        dense_layers: list[Dense],
        out_layer: SoftmaxOut,
        decoders: list[KernelBank] | None = None,
        provenance: Provenance | None = None,
    ):
        self.config = config
        self.conv_layers = conv_layers
        self.hyper = hyper
        self.dense_layers = dense_layers
        self.out_layer = out_layer
        self.decoders = decoders
        self.provenance = provenance or Provenance()

    def named_layers(self):
        """Parameterised layers in forward order, with stable names."""
        for i, layer in enumerate(self.conv_layers):
            yield f"conv{i + 1}", layer
        yield "hyper", self.hyper
        for i, layer in enumerate(self.dense_layers):
            yield f"fc{i + 1}", layer
        yield "out", self.out_layer

    def parameter_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Flat (name, array) list in the serialization order."""
        out = []
        for lname, layer in self.named_layers():
            for pname, arr in layer.parameters().items():
                out.append((f"{lname}.{pname}", arr))
        if self.decoders is not None:
            for i, dec in enumerate(self.decoders):
                out.append((f"dec{i + 1}.w", dec.w))
                out.append((f"dec{i + 1}.b", dec.b))
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [arr.copy() for _, arr in self.parameter_arrays()]

    def restore(self, state: list[np.ndarray]) -> None:
        for (_, arr), saved in zip(self.parameter_arrays(), state):
            arr[...] = saved

    def _selected_taps(self) -> list[int]:
        n = len(self.conv_layers)
        return [n - 1] if self.config.hyper.fusion == "top" else list(range(n))

    def forward(self, batch):
        """Forward pass; returns (probs, tape) with everything backward needs."""
        x = as_tensor4(batch)
        rows, cols = self.config.input_spatial
        if x.shape[1] != 1 or x.shape[2] != rows or x.shape[3] != cols:
            raise ConfigurationError(
                f"batch shape {x.shape} does not match configured input 1x{rows}x{cols}"
            )
        tape = {"conv": [], "traces": [], "taps": []}
        pre_pool = self.config.hyper.tap_point == "pre_pool"
        cur = x
        for conv in self.conv_layers:
            h, cache = conv.forward(cur)
            tape["conv"].append(cache)
            if self.config.pool_after_conv:
                pooled, trace = maxpool2(h)
                tape["traces"].append(trace)
                tape["taps"].append(h if pre_pool else pooled)
                cur = pooled
            else:
                tape["traces"].append(None)
                tape["taps"].append(h)
                cur = h
        selected = self._selected_taps()
        hout, tape["hyper"] = self.hyper.forward([tape["taps"][i] for i in selected])
        tape["dense"] = []
        cur = hout
        for dense in self.dense_layers:
            cur, cache = dense.forward(cur)
            tape["dense"].append(cache)
        probs, tape["out"] = self.out_layer.forward(cur)
        return probs, tape

    def backward(self, tape, grad_probs):
        """Gradients for every parameterised layer, keyed by layer name."""
        grads: dict[str, dict[str, np.ndarray]] = {}
        g, grads["out"] = self.out_layer.backward(tape["out"], grad_probs)
        for i in reversed(range(len(self.dense_layers))):
            g, grads[f"fc{i + 1}"] = self.dense_layers[i].backward(tape["dense"][i], g)
        grad_taps, grads["hyper"] = self.hyper.backward(tape["hyper"], g)
        tap_grads = dict(zip(self._selected_taps(), grad_taps))

        pre_pool = self.config.hyper.tap_point == "pre_pool"
        g_up = None  # gradient flowing down from the scale above
        for k in reversed(range(len(self.conv_layers))):
            if self.config.pool_after_conv:
                trace = tape["traces"][k]
                b, c, ho, wo = trace.pooled_shape
                g_pooled = np.zeros((b, c, ho, wo))
                if g_up is not None:
                    g_pooled += g_up
                if not pre_pool and k in tap_grads:
                    g_pooled += tap_grads[k]
                gh = maxpool2_backward(trace, g_pooled)
                if pre_pool and k in tap_grads:
                    gh = gh + tap_grads[k]
            else:
                gh = np.zeros_like(tape["conv"][k][1])
                if g_up is not None:
                    gh += g_up
                if k in tap_grads:
                    gh += tap_grads[k]
            g_up, grads[f"conv{k + 1}"] = self.conv_layers[k].backward(tape["conv"][k], gh)
        return grads

    def apply_gradients(self, grads, lr: float) -> None:
        for lname, layer in self.named_layers():
            params = layer.parameters()
            for pname, arr in params.items():
                arr -= lr * grads[lname][pname]


def build_network(
    config: NetworkConfig,
    pretrained=None,
    seed: int = 0,
) -> Model:
    """Assemble a model; conv kernels come from a pretrained stack if given.

    The hyperlayer, dense, and output layers are always freshly initialised
    from ``seed``.  The pretrained stack's decoders are retained on the model
    for reconstruction.
    """
    validate_config(config)
    shape_trace(config)  # raises if the chain collapses
    rng = np.random.default_rng(seed)

    conv_layers: list[ConvTanh] = []
    decoders = None
    if pretrained is not None:
        if len(pretrained) != len(config.convs):
            raise ConfigurationError(
                f"pretrained stack has {len(pretrained)} layers, config wants {len(config.convs)}"
            )
        decoders = []
        in_maps = 1
        for i, (spec, cae_layer) in enumerate(zip(config.convs, pretrained)):
            enc = cae_layer.encoder
            expect = (spec.maps, in_maps, spec.filter_size, spec.filter_size)
            if enc.w.shape != expect or cae_layer.stride != spec.stride:
                raise ConfigurationError(
                    f"pretrained layer {i + 1} shape {enc.w.shape} (stride {cae_layer.stride}) "
                    f"does not match config {expect} (stride {spec.stride})"
                )
            conv_layers.append(
                ConvTanh(KernelBank(enc.w.copy(), enc.b.copy()), spec.stride)
            )
            decoders.append(KernelBank(cae_layer.decoder.w.copy(), cae_layer.decoder.b.copy()))
            in_maps = spec.maps
    else:
        in_maps = 1
        for spec in config.convs:
            k = spec.filter_size
            fan_in, fan_out = in_maps * k * k, spec.maps * k * k
            bank = KernelBank(
                glorot_uniform(rng, (spec.maps, in_maps, k, k), fan_in, fan_out),
                np.zeros(spec.maps),
            )
            conv_layers.append(ConvTanh(bank, spec.stride))
            in_maps = spec.maps

    shapes = tap_shapes(config)
    weights = (1,) * len(shapes) if config.hyper.fusion == "top" else config.hyper.weights
    sizes = allocate_blocks(config.hyper.out_neurons, weights)
    blocks = []
    for (maps, r, c), n in zip(shapes, sizes):
        flat = maps * r * c
        blocks.append((glorot_uniform(rng, (n, flat), flat, n), np.zeros(n)))
    hyper = Hyper(blocks)

    dense_layers = []
    width = config.hyper.out_neurons
    for n in config.dense:
        dense_layers.append(Dense(glorot_uniform(rng, (n, width), width, n), np.zeros(n)))
        width = n
    out_layer = SoftmaxOut(
        glorot_uniform(rng, (config.classes, width), width, config.classes),
        np.zeros(config.classes),
    )

    return Model(
        config,
        conv_layers,
        hyper,
        dense_layers,
        out_layer,
        decoders=decoders,
        provenance=Provenance(pretrained=pretrained is not None, seed=seed),
    )


def forward_classify(model: Model, batch):
    """Class probabilities for a batch; also returns the forward tape."""
    return model.forward(batch)


def predict(model: Model, batch) -> np.ndarray:
    """Most probable class per sample; ties go to the lower class index."""
    probs, _ = model.forward(batch)
    return probs.argmax(axis=1)


def _check_labels(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ConfigurationError(f"labels must lie in [0, {classes}), got {labels.min()}..{labels.max()}")
    return labels


def nll_loss(probs, labels) -> float:
    """Mean negative log-likelihood; probabilities clamped below at 1e-12."""
    probs = np.asarray(probs)
    labels = _check_labels(labels, probs.shape[1])
    p = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(p, 1e-12)).mean())


def nll_grad(probs, labels) -> np.ndarray:
    """Gradient of :func:`nll_loss` with respect to the probability matrix."""
    probs = np.asarray(probs)
    labels = _check_labels(labels, probs.shape[1])
    g = np.zeros_like(probs)
    n = probs.shape[0]
    p = np.maximum(probs[np.arange(n), labels], 1e-12)
    g[np.arange(n), labels] = -1.0 / (p * n)
    return g


def evaluate(model: Model, images, labels, batch_size: int = 64):
    """(mean NLL, error rate in percent, predictions) over a dataset."""
    images = as_tensor4(images)
    labels = np.asarray(labels)
    preds = np.empty(len(labels), dtype=np.int64)
    total_nll = 0.0
    for start in range(0, len(labels), batch_size):
        stop = min(start + batch_size, len(labels))
        probs, _ = model.forward(images[start:stop])
        total_nll += nll_loss(probs, labels[start:stop]) * (stop - start)
        preds[start:stop] = probs.argmax(axis=1)
    nll = total_nll / len(labels)
    err = 100.0 * float((preds != labels).mean())
    return nll, err, preds


@dataclass
class EpochStats:
    train_nll: float
    val_nll: float
    val_error_rate: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    selected_epoch: int = -1


def finetune(
    model: Model,
    train_images,
    train_labels,
    val_images,
    val_labels,
    params: TrainingParams | None = None,
) -> TrainLog:
    """Supervised minibatch SGD through the whole network.

    Shuffles per epoch from the run seed, tracks validation NLL after every
    epoch, stops early once ``early_stop_patience`` epochs pass without a new
    best, and leaves the model at its best-validation snapshot.
    """
    params = params or model.config.training
    train_images = as_tensor4(train_images)
    val_images = as_tensor4(val_images)
    train_labels = _check_labels(train_labels, model.config.classes)
    val_labels = _check_labels(val_labels, model.config.classes)
    if len(train_labels) == 0 or len(val_labels) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    if params.epochs_finetune < 1:
        raise ConfigurationError("epochs_finetune must be >= 1")

    rng = np.random.default_rng(params.seed)
    log = TrainLog()
    best_state = model.snapshot()
    best_val = np.inf
    stale = 0
    n = len(train_labels)
    for epoch in range(params.epochs_finetune):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, params.batch_size):
            idx = order[start : start + params.batch_size]
            probs, tape = model.forward(train_images[idx])
            loss = nll_loss(probs, train_labels[idx])
            if not np.isfinite(loss):
                raise NumericDivergenceError(f"training loss diverged at epoch {epoch}")
            grads = model.backward(tape, nll_grad(probs, train_labels[idx]))
            model.apply_gradients(grads, params.lr_finetune)
            running += loss * len(idx)
            seen += len(idx)
        val_nll, val_err, _ = evaluate(model, val_images, val_labels, params.batch_size)
        log.epochs.append(EpochStats(running / seen, val_nll, val_err))
        if val_nll < best_val:
            best_val = val_nll
            best_state = model.snapshot()
            log.selected_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= params.early_stop_patience:
                break
    model.restore(best_state)
    model.provenance.finetuned = True
    return log


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def network_grad_report(
    model: Model,
    batch,
    labels,
    eps: float = 1e-5,
    *,
    corrupt_layer: str | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative FD error of the NLL gradient, per parameterised layer.

    ``corrupt_layer`` deliberately perturbs that layer's analytic gradient
    before comparing (a hook for verifying that the check can fail).
    """
    batch = as_tensor4(batch)
    labels = _check_labels(labels, model.config.classes)
    probs, tape = model.forward(batch)
    grads = model.backward(tape, nll_grad(probs, labels))
    if corrupt_layer is not None:
        target = grads[corrupt_layer]
        first = next(iter(target))
        target[first] = target[first] + 0.5 * np.abs(target[first]).max() + 1.0

    def loss():
        p, _ = model.forward(batch)
        return nll_loss(p, labels)

    report = {}
    for lname, layer in model.named_layers():
        params = layer.parameters()
        if not params:
            continue
        report[lname] = fd_max_rel_error(loss, params, grads[lname], eps, seed=seed)
    return report


def grad_check(layer_or_network, input, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative analytic-vs-finite-difference gradient error.

    For a single layer the probe loss is a fixed random projection of the
    output; for a whole model it is the NLL on alternating labels.
    """
    if isinstance(layer_or_network, Model):
        model = layer_or_network
        x = as_tensor4(input)
        labels = np.arange(x.shape[0]) % model.config.classes
        report = network_grad_report(model, x, labels, eps, seed=seed)
        return max(report.values(), default=0.0)
    return layer_grad_check(layer_or_network, input, eps, seed)


# ---------------------------------------------------------------------------
# Serialization: magic, version, declared length, canonical config text,
# little-endian float64 parameter arrays, trailing CRC32.
# ---------------------------------------------------------------------------

def _config_text(model: Model) -> str:
    from .runconfig import network_sections, write_ini  # deferred: avoids a cycle

    sections = network_sections(model.config)
    sections["provenance"] = {
        "pretrained": str(model.provenance.pretrained).lower(),
        "finetuned": str(model.provenance.finetuned).lower(),
        "seed": str(model.provenance.seed),
    }
    sections["storage"] = {"decoders": str(model.decoders is not None).lower()}
    return write_ini(sections)


def _config_from_text(text: str):
    from .runconfig import network_from_sections, parse_ini

    sections = parse_ini(text)
    config = network_from_sections(sections)
    prov_raw = sections.get("provenance", {})
    prov = Provenance(
        pretrained=prov_raw.get("pretrained") == "true",
        finetuned=prov_raw.get("finetuned") == "true",
        seed=int(prov_raw.get("seed", "0")),
    )
    has_decoders = sections.get("storage", {}).get("decoders") == "true"
    return config, prov, has_decoders


def save_model(model: Model, path) -> None:
    """Write the model as a single binary file with a trailing CRC32."""
    cfg = _config_text(model).encode("utf-8")
    arrays = model.parameter_arrays()
    body = bytearray()
    body += MODEL_MAGIC
    body += struct.pack("<I", MODEL_VERSION)
    payload = struct.pack("<I", len(cfg)) + cfg
    for _, arr in arrays:
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    total = 4 + 4 + 8 + len(payload) + 4
    body += struct.pack("<Q", total)
    body += payload
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_model(path) -> Model:
    """Read a model file back; raises a distinct error per failure mode."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise ModelTruncatedError(f"{path}: file too short to hold a model header")
    if blob[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic bytes {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{path}: unsupported format version {version}")
    (total,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < total:
        raise ModelTruncatedError(f"{path}: {len(blob)} bytes, header declares {total}")
    if len(blob) > total:
        raise ModelFormatError(f"{path}: {len(blob) - total} trailing bytes")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ModelChecksumError(f"{path}: CRC mismatch, file is corrupted")

    offset = 16
    (cfg_len,) = struct.unpack("<I", blob[offset : offset + 4])
    offset += 4
    if offset + cfg_len > total - 4:
        raise ModelFormatError(f"{path}: config block overruns the file")
    try:
        config, prov, has_decoders = _config_from_text(blob[offset : offset + cfg_len].decode("utf-8"))
    except (ValueError, KeyError) as exc:
        raise ModelFormatError(f"{path}: unparseable config block: {exc}") from exc
    offset += cfg_len

    model = build_network(config, pretrained=None, seed=prov.seed)
    model.provenance = prov
    if has_decoders:
        decoders = []
        in_maps = 1
        for spec in config.convs:
            k = spec.filter_size
            decoders.append(KernelBank(np.zeros((in_maps, spec.maps, k, k)), np.zeros(in_maps)))
            in_maps = spec.maps
        model.decoders = decoders
    else:
        model.decoders = None

    for name, arr in model.parameter_arrays():
        nbytes = arr.size * 8
        if offset + nbytes > total - 4:
            raise ModelFormatError(f"{path}: parameter block {name} overruns the file")
        arr[...] = np.frombuffer(blob, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != total - 4:
        raise ModelFormatError(f"{path}: {total - 4 - offset} unread payload bytes")
    return model
