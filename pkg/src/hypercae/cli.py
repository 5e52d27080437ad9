"""Command-line interface: reproducible data generation, training, and evaluation.

Subcommands: ``gen-data``, ``pretrain``, ``finetune``, ``eval``,
``reconstruct``, ``gradcheck``.  Every command is deterministic given its
config and seed; exit codes are 0 (success), 1 (numeric or training
failure), 2 (usage or configuration error).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cae import pretrain_stack
from .data import load_dataset, generate_synthetic, read_image, save_dataset, select, write_ppm, write_image
from .deconv import ReconstructionRequest, reconstruct_from_layer, render_signed
from .errors import (
    ConfigurationError,
    DataFormatError,
    GenerationError,
    ModelIOError,
    NumericDivergenceError,
)
from .metrics import binary_metrics, confusion, format_kv, format_table
from .network import (
    build_network,
    evaluate,
    finetune,
    load_model,
    network_grad_report,
    reduced_check_config,
    save_model,
)
from .runconfig import (
    RunConfig,
    canonical_text,
    default_run_config,
    paper_scale_run_config,
    parse_run_config,
)

DENSE_TOL = 1e-5
CONV_TOL = 1e-4


def _load_run_config(args) -> RunConfig:
    base = paper_scale_run_config() if args.paper_scale else default_run_config()
    if args.config is not None:
        rc = parse_run_config(Path(args.config).read_text(encoding="utf-8"), base)
    else:
        rc = base
    if args.seed is not None:
        rc.network.training.seed = args.seed
        rc.synth.seed = args.seed
    return rc


def cmd_gen_data(args) -> int:
    rc = _load_run_config(args)
    out_dir = Path(args.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"error: {out_dir} is not empty (use --force to overwrite)", file=sys.stderr)
        return 2
    ds = generate_synthetic(rc.synth)
    save_dataset(ds, out_dir)
    (out_dir / "run.ini").write_text(canonical_text(rc), encoding="utf-8")
    by_role = {role: int(np.isin(ds.fold, folds).sum()) for role, folds in
               (("train", (2, 3, 4, 5)), ("val", (1,)), ("test", (0,)))}
    print(
        f"wrote {len(ds)} samples to {out_dir} "
        f"(train={by_role['train']} val={by_role['val']} test={by_role['test']})"
    )
    return 0


def cmd_pretrain(args) -> int:
    rc = _load_run_config(args)
    ds = load_dataset(args.data_dir)
    train = select(ds, "train")
    stack, report = pretrain_stack(rc.network, train.images, tied=args.tied)
    model = build_network(rc.network, stack, seed=rc.network.training.seed)
    save_model(model, args.model_out)
    log_path = Path(args.log) if args.log else Path(str(args.model_out) + ".log")
    lines = []
    for k, history in enumerate(report.losses):
        for epoch, mse in enumerate(history):
            lines.append(f"layer={k + 1} epoch={epoch} mse={mse:.12g}")
    log_path.write_text("\n".join(lines) + "\n", encoding="ascii")
    for k, history in enumerate(report.losses):
        print(f"layer {k + 1}: mse {history[0]:.6g} -> {history[-1]:.6g}")
    print(f"saved pretrained model to {args.model_out}")
    return 0


def cmd_finetune(args) -> int:
    model = load_model(args.model_in)
    params = model.config.training
    if args.config is not None:
        base = RunConfig(network=replace(model.config), synth=default_run_config().synth)
        rc = parse_run_config(Path(args.config).read_text(encoding="utf-8"), base)
        params = rc.network.training
        model.config.training = params
    if args.seed is not None:
        params.seed = args.seed
    ds = load_dataset(args.data_dir)
    train = select(ds, "train")
    val = select(ds, "val")
    log = finetune(model, train.images, train.labels, val.images, val.labels, params)
    save_model(model, args.model_out)
    log_path = Path(args.log) if args.log else Path(str(args.model_out) + ".log")
    lines = [
        f"epoch={i} train_nll={st.train_nll:.12g} val_nll={st.val_nll:.12g} "
        f"val_error_rate={st.val_error_rate:.12g}"
        for i, st in enumerate(log.epochs)
    ]
    lines.append(f"# selected_epoch={log.selected_epoch}")
    log_path.write_text("\n".join(lines) + "\n", encoding="ascii")
    best = log.epochs[log.selected_epoch]
    print(
        f"ran {len(log.epochs)} epochs; kept epoch {log.selected_epoch} "
        f"(val_nll={best.val_nll:.6g}, val_error_rate={best.val_error_rate:.6g})"
    )
    print(f"saved fine-tuned model to {args.model_out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data_dir)
    subset = select(ds, args.role)
    if len(subset) == 0:
        raise ConfigurationError(f"no samples with role {args.role!r}")
    _, _, preds = evaluate(model, subset.images, subset.labels)
    conf = confusion(preds, subset.labels, model.config.classes)
    m = binary_metrics(conf, positive=args.positive)
    print(format_table(m))
    print()
    print(format_kv(m))
    if args.predictions_out:
        lines = [
            f"{i}\t{subset.labels[i]}\t{preds[i]}" for i in range(len(subset))
        ]
        Path(args.predictions_out).write_text("\n".join(lines) + "\n", encoding="ascii")
    return 0


def cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    image = read_image(args.image)
    source = "finetuned_tied" if args.weights == "tied" else "pretrained_decoder"
    recon = reconstruct_from_layer(
        ReconstructionRequest(model, image, args.layer, source)
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm = out_dir / f"recon_layer{args.layer}.pgm"
    ppm = out_dir / f"recon_layer{args.layer}_signed.ppm"
    write_image(recon, pgm)
    write_ppm(ppm, render_signed(recon))
    print(f"wrote {pgm} and {ppm}")
    return 0


def _gradcheck_tolerance(layer_name: str) -> float:
    return DENSE_TOL if layer_name.startswith("fc") or layer_name == "out" else CONV_TOL


def cmd_gradcheck(args) -> int:
    if args.scale == "reduced":
        config = reduced_check_config()
        if args.seed is not None:
            config.training.seed = args.seed
    else:
        config = _load_run_config(args).network
    seed = config.training.seed
    model = build_network(config, pretrained=None, seed=seed)
    rng = np.random.default_rng(seed)
    rows, cols = config.input_spatial
    batch = rng.uniform(-1.0, 1.0, size=(2, 1, rows, cols))
    labels = np.arange(2) % config.classes
    corrupt = "conv1" if args.inject_gradient_error else None
    report = network_grad_report(model, batch, labels, eps=1e-5, corrupt_layer=corrupt)
    ok = True
    for lname, err in report.items():
        tol = _gradcheck_tolerance(lname)
        status = "ok" if err < tol else "FAIL"
        ok = ok and err < tol
        print(f"layer={lname} max_rel_err={err:.6e} tol={tol:.0e} status={status}")
    return 0 if ok else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypercae",
        description="Train, evaluate, and visualize a multi-scale convolutional auto-encoder classifier.",
    )
    parser.add_argument("--config", type=Path, help="INI run configuration")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument(
        "--paper-scale",
        action="store_true",
        help="use the full-size reference topology (100x100 inputs) as the config base",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("out_dir", type=Path)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="layer-wise unsupervised pretraining")
    p.add_argument("data_dir", type=Path)
    p.add_argument("model_out", type=Path)
    p.add_argument("--log", type=Path, help="loss log path (default: MODEL_OUT.log)")
    p.add_argument("--tied", action="store_true", help="tie decoder kernels to the encoder's")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning of a pretrained model")
    p.add_argument("data_dir", type=Path)
    p.add_argument("model_in", type=Path)
    p.add_argument("model_out", type=Path)
    p.add_argument("--log", type=Path, help="training log path (default: MODEL_OUT.log)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a model on one data role")
    p.add_argument("model", type=Path)
    p.add_argument("data_dir", type=Path)
    p.add_argument("--role", choices=("train", "val", "test"), default="test")
    p.add_argument("--positive", type=int, default=1, help="positive class index")
    p.add_argument("--predictions-out", type=Path, help="dump per-sample predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="reconstruct an image from one conv scale")
    p.add_argument("model", type=Path)
    p.add_argument("image", type=Path)
    p.add_argument("--layer", type=int, required=True, help="conv scale, 1-based")
    p.add_argument("--weights", choices=("tied", "pretrained"), default="tied")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--scale", choices=("reduced", "config"), default="reduced")
    p.add_argument("--inject-gradient-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (ConfigurationError, DataFormatError, ModelIOError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericDivergenceError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
