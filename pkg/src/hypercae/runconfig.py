"""INI-style run configuration: parsing, validation, canonical serialization.

A run config holds every network/training knob plus the synthetic-data
parameters, in four sections: ``[network]``, ``[hyper]``, ``[training]``,
``[data]``.  Unknown sections or keys are rejected.  Serialization is
canonical (fixed section and key order), so parse -> serialize -> parse is
the identity.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from .data import SynthSpec
from .errors import ConfigurationError
from .network import ConvSpec, HyperSpec, NetworkConfig, TrainingParams, desk_scale_config, full_scale_config

__all__ = [
    "RunConfig",
    "default_run_config",
    "paper_scale_run_config",
    "parse_ini",
    "write_ini",
    "network_sections",
    "network_from_sections",
    "parse_run_config",
    "canonical_text",
]


@dataclass
class RunConfig:
    network: NetworkConfig
    synth: SynthSpec


def default_run_config() -> RunConfig:
    """Desk-scale defaults: 32x32 images, maps (8, 16, 24), 90 fusion neurons."""
    return RunConfig(network=desk_scale_config(), synth=SynthSpec())


def paper_scale_run_config() -> RunConfig:
    """Full-size preset: the 100x100 reference topology and matching data."""
    return RunConfig(
        network=full_scale_config(),
        synth=SynthSpec(image_size=100, grain_scale=20, vacuole_radius_range=(3, 8)),
    )


# ---------------------------------------------------------------------------
# Low-level INI helpers
# ---------------------------------------------------------------------------

def parse_ini(text: str) -> dict[str, dict[str, str]]:
    """Parse INI text to {section: {key: value}} without interpolation."""
    cp = configparser.ConfigParser(
        interpolation=None,
        delimiters=("=",),
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
    )
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"bad config syntax: {exc}") from exc
    return {section: dict(cp.items(section)) for section in cp.sections()}


def write_ini(sections: dict[str, dict[str, str]]) -> str:
    """Serialize {section: {key: value}} in the given order."""
    lines = []
    for name, kv in sections.items():
        lines.append(f"[{name}]")
        for key, value in kv.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def _ints(value: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok.strip()) for tok in value.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected comma-separated integers, got {value!r}") from exc


def _int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from exc


def _float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected a number, got {value!r}") from exc


def _bool(value: str, key: str) -> bool:
    if value not in ("true", "false"):
        raise ConfigurationError(f"{key}: expected true or false, got {value!r}")
    return value == "true"


_csv = ",".join


# ---------------------------------------------------------------------------
# NetworkConfig <-> sections
# ---------------------------------------------------------------------------

def network_sections(config: NetworkConfig) -> dict[str, dict[str, str]]:
    """The [network]/[hyper]/[training] sections describing ``config``."""
    tr = config.training
    return {
        "network": {
            "input_rows": str(config.input_spatial[0]),
            "input_cols": str(config.input_spatial[1]),
            "conv_maps": _csv(str(s.maps) for s in config.convs),
            "conv_filters": _csv(str(s.filter_size) for s in config.convs),
            "conv_strides": _csv(str(s.stride) for s in config.convs),
            "pool_after_conv": str(config.pool_after_conv).lower(),
            "dense": _csv(str(n) for n in config.dense),
            "classes": str(config.classes),
        },
        "hyper": {
            "out_neurons": str(config.hyper.out_neurons),
            "weights": _csv(str(w) for w in config.hyper.weights),
            "tap_point": config.hyper.tap_point,
            "fusion": config.hyper.fusion,
        },
        "training": {
            "lr_pretrain": repr(tr.lr_pretrain),
            "lr_finetune": repr(tr.lr_finetune),
            "batch_size": str(tr.batch_size),
            "epochs_pretrain": str(tr.epochs_pretrain),
            "epochs_finetune": str(tr.epochs_finetune),
            "seed": str(tr.seed),
            "early_stop_patience": str(tr.early_stop_patience),
        },
    }


def _data_section(spec: SynthSpec) -> dict[str, str]:
    return {
        "image_size": str(spec.image_size),
        "n_normal": str(spec.n_normal),
        "n_abnormal": str(spec.n_abnormal),
        "vacuole_count_min": str(spec.vacuole_count_range[0]),
        "vacuole_count_max": str(spec.vacuole_count_range[1]),
        "vacuole_radius_min": str(spec.vacuole_radius_range[0]),
        "vacuole_radius_max": str(spec.vacuole_radius_range[1]),
        "grain_scale": str(spec.grain_scale),
        "contrast": repr(spec.contrast),
        "seed": str(spec.seed),
    }


def _apply_network(base: NetworkConfig, sections: dict[str, dict[str, str]]) -> NetworkConfig:
    net = dict(sections.get("network", {}))
    hyp = dict(sections.get("hyper", {}))
    tr = dict(sections.get("training", {}))

    rows = _int(net.pop("input_rows", str(base.input_spatial[0])), "input_rows")
    cols = _int(net.pop("input_cols", str(base.input_spatial[1])), "input_cols")
    maps = _ints(net.pop("conv_maps", _csv(str(s.maps) for s in base.convs)), "conv_maps")
    filters = _ints(net.pop("conv_filters", _csv(str(s.filter_size) for s in base.convs)), "conv_filters")
    strides = _ints(net.pop("conv_strides", _csv(str(s.stride) for s in base.convs)), "conv_strides")
    if not len(maps) == len(filters) == len(strides):
        raise ConfigurationError("conv_maps, conv_filters, and conv_strides must have equal length")
    pool = _bool(net.pop("pool_after_conv", str(base.pool_after_conv).lower()), "pool_after_conv")
    dense = _ints(net.pop("dense", _csv(str(n) for n in base.dense)), "dense")
    classes = _int(net.pop("classes", str(base.classes)), "classes")
    if net:
        raise ConfigurationError(f"unknown [network] keys: {sorted(net)}")

    hyper = HyperSpec(
        out_neurons=_int(hyp.pop("out_neurons", str(base.hyper.out_neurons)), "out_neurons"),
        weights=_ints(hyp.pop("weights", _csv(str(w) for w in base.hyper.weights)), "weights"),
        tap_point=hyp.pop("tap_point", base.hyper.tap_point),
        fusion=hyp.pop("fusion", base.hyper.fusion),
    )
    if hyp:
        raise ConfigurationError(f"unknown [hyper] keys: {sorted(hyp)}")

    bt = base.training
    training = TrainingParams(
        lr_pretrain=_float(tr.pop("lr_pretrain", repr(bt.lr_pretrain)), "lr_pretrain"),
        lr_finetune=_float(tr.pop("lr_finetune", repr(bt.lr_finetune)), "lr_finetune"),
        batch_size=_int(tr.pop("batch_size", str(bt.batch_size)), "batch_size"),
        epochs_pretrain=_int(tr.pop("epochs_pretrain", str(bt.epochs_pretrain)), "epochs_pretrain"),
        epochs_finetune=_int(tr.pop("epochs_finetune", str(bt.epochs_finetune)), "epochs_finetune"),
        seed=_int(tr.pop("seed", str(bt.seed)), "seed"),
        early_stop_patience=_int(tr.pop("early_stop_patience", str(bt.early_stop_patience)), "early_stop_patience"),
    )
    if tr:
        raise ConfigurationError(f"unknown [training] keys: {sorted(tr)}")

    return NetworkConfig(
        input_spatial=(rows, cols),
        convs=tuple(ConvSpec(m, f, s) for m, f, s in zip(maps, filters, strides)),
        pool_after_conv=pool,
        hyper=hyper,
        dense=dense,
        classes=classes,
        training=training,
    )


def network_from_sections(sections: dict[str, dict[str, str]]) -> NetworkConfig:
    """NetworkConfig from sections that spell out every key (model files)."""
    return _apply_network(NetworkConfig(), sections)


def _apply_data(base: SynthSpec, kv: dict[str, str]) -> SynthSpec:
    kv = dict(kv)
    spec = replace(
        base,
        image_size=_int(kv.pop("image_size", str(base.image_size)), "image_size"),
        n_normal=_int(kv.pop("n_normal", str(base.n_normal)), "n_normal"),
        n_abnormal=_int(kv.pop("n_abnormal", str(base.n_abnormal)), "n_abnormal"),
        vacuole_count_range=(
            _int(kv.pop("vacuole_count_min", str(base.vacuole_count_range[0])), "vacuole_count_min"),
            _int(kv.pop("vacuole_count_max", str(base.vacuole_count_range[1])), "vacuole_count_max"),
        ),
        vacuole_radius_range=(
            _int(kv.pop("vacuole_radius_min", str(base.vacuole_radius_range[0])), "vacuole_radius_min"),
            _int(kv.pop("vacuole_radius_max", str(base.vacuole_radius_range[1])), "vacuole_radius_max"),
        ),
        grain_scale=_int(kv.pop("grain_scale", str(base.grain_scale)), "grain_scale"),
        contrast=_float(kv.pop("contrast", repr(base.contrast)), "contrast"),
        seed=_int(kv.pop("seed", str(base.seed)), "seed"),
    )
    if kv:
        raise ConfigurationError(f"unknown [data] keys: {sorted(kv)}")
    return spec


KNOWN_SECTIONS = ("network", "hyper", "training", "data")


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text over ``base`` (desk-scale defaults when omitted)."""
    sections = parse_ini(text)
    unknown = set(sections) - set(KNOWN_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    base = base or default_run_config()
    return RunConfig(
        network=_apply_network(base.network, sections),
        synth=_apply_data(base.synth, sections.get("data", {})),
    )


def canonical_text(rc: RunConfig) -> str:
    """Canonical serialization: fixed section order, every key spelled out."""
    sections = network_sections(rc.network)
    sections["data"] = _data_section(rc.synth)
    return write_ini(sections)
