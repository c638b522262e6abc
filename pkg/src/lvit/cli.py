"""``lvit`` command line: train, eval, predict, gradcheck, synth.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 non-finite loss,
5 checkpoint/config mismatch, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from ._io import atomic_write_text
from .autodiff import RngState, Tensor, softmax_lastaxis
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (PREPROCESS_MODES, decode_image, gen_synthetic, load_image_dir, preprocess,
                   write_synthetic_tree)
from .errors import (CompatibilityError, ConfigError, ContractError, FormatError, IngestError,
                     NumericalError)
from .evaluation import confusion, confusion_to_csv, macro_metrics, render_heatmap
from .gradcheck import check_tiny_model
from .kvconfig import build_dataclass, coerce, format_kv, format_value, parse_kv
from .model import ModelConfig, init_params, predict
from .training import TrainConfig, eval_logits, fit

log = logging.getLogger("lvit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6
GRADCHECK_TOLERANCE = 1e-5

# run-level keys that are neither ModelConfig nor TrainConfig fields
RUN_KEYS = {"data": str, "synthetic": int, "noise": float, "split": str,
            "preprocess": str, "out": str, "checkpoint": str}
RUN_DEFAULTS = {"data": "", "synthetic": 0, "noise": 0.3, "split": "", "preprocess": "crop-resize",
                "out": "", "checkpoint": ""}

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed", "out": "out", "data": "data", "synthetic": "synthetic", "noise": "noise",
    "split": "split", "preprocess": "preprocess", "checkpoint": "checkpoint",
    "embed_dim": "embed_dim", "heads": "num_heads", "layers": "num_layers",
    "mlp_ratio": "mlp_ratio", "dropout": "dropout_p", "lr": "lr0", "decay_gamma": "decay_gamma",
    "epochs": "epochs", "batch_size": "batch_size", "warm_start": "warm_start",
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def resolve_config(args) -> dict[str, str]:
    """Defaults, then ``--config`` file, then flags; all values as text."""
    values: dict[str, str] = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            values[f.name] = format_value(getattr(cls(), f.name))
    values.update({k: str(v) for k, v in RUN_DEFAULTS.items()})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_kv(path.read_text())
        unknown = sorted(set(file_values) - set(values))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        values.update(file_values)
    for dest, key in FLAG_KEYS.items():
        flag = getattr(args, dest, None)
        if flag is not None:
            values[key] = format_value(flag)
    return values


def split_config(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig, dict]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model = build_dataclass(ModelConfig, {k: v for k, v in values.items() if k in model_keys})
    train = build_dataclass(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    run = {k: coerce(values[k], tp, k) for k, tp in RUN_KEYS.items()}
    if run["preprocess"] not in PREPROCESS_MODES:
        raise ConfigError(f"preprocess must be one of {PREPROCESS_MODES}")
    return model, train, run


def _require_out(run: dict) -> Path:
    if not run["out"]:
        raise ConfigError("--out is required")
    out = Path(run["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_data(run: dict, seed: int, num_classes: int | None, default_split: str):
    if bool(run["data"]) == bool(run["synthetic"]):
        raise ConfigError("give exactly one of --data DIR or --synthetic N")
    if run["synthetic"]:
        split = run["split"] or default_split
        return gen_synthetic(run["synthetic"], seed, run["noise"], split)
    try:
        return load_image_dir(run["data"], num_classes, mode=run["preprocess"])
    except ContractError as exc:
        raise IngestError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run_train(args) -> int:
    values = resolve_config(args)
    model_cfg, train_cfg, run = split_config(values)
    out = _require_out(run)
    atomic_write_text(out / "config.resolved", format_kv(values))

    dataset = _load_data(run, train_cfg.seed, model_cfg.num_classes, "train")
    params = init_params(model_cfg, RngState(train_cfg.seed))
    reports = fit(params, dataset, train_cfg)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "accuracy", "lr"])
    for r in reports:
        w.writerow([r.epoch, repr(r.loss), repr(r.accuracy), repr(r.lr)])
    metadata = {"epoch": reports[-1].epoch + 1, "seed": train_cfg.seed,
                "label_names": json.dumps(dataset.label_names)}
    save_checkpoint(params, out / "checkpoint.lvit", metadata)
    atomic_write_text(out / "train_log.csv", buf.getvalue())
    print(f"final train accuracy {reports[-1].accuracy:.4f}, loss {reports[-1].loss:.6f}")
    return EXIT_OK


def _open_checkpoint(path: str):
    if not path:
        raise ConfigError("--checkpoint is required")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except FormatError as exc:
        raise CompatibilityError(f"{path}: {exc}") from exc


def run_eval(args) -> int:
    values = resolve_config(args)
    _, train_cfg, run = split_config(values)
    out = _require_out(run)
    atomic_write_text(out / "config.resolved", format_kv(values))

    params, config, _ = _open_checkpoint(run["checkpoint"])
    dataset = _load_data(run, train_cfg.seed, None, "test")
    if dataset.num_classes != config.num_classes:
        raise CompatibilityError(f"checkpoint has {config.num_classes} classes, "
                                 f"data has {dataset.num_classes}")
    preds = eval_logits(params, dataset.images()).argmax(axis=1)
    cm = confusion(dataset.labels(), preds, config.num_classes, dataset.label_names)
    report = macro_metrics(cm)

    atomic_write_text(out / "confusion.csv", confusion_to_csv(cm))
    render_heatmap(cm, out / f"heatmap.{args.heatmap_format}", args.heatmap_mode)
    atomic_write_text(out / "metrics.txt", report.to_text())
    print(report.to_table())
    print(f"overall accuracy {report.overall_accuracy:.4f}")
    return EXIT_OK


def run_predict(args) -> int:
    params, config, metadata = _open_checkpoint(args.checkpoint)
    raw = decode_image(args.image)
    image = preprocess(raw, config.image_size, args.preprocess)
    probs = softmax_lastaxis(Tensor(eval_logits(params, image[None])[0])).data
    names = (json.loads(metadata["label_names"]) if "label_names" in metadata
             else [str(i) for i in range(config.num_classes)])
    print(f"predicted {names[predict(probs)]}")
    for name, p in zip(names, probs):
        print(f"{name} {float(p)!r}")
    return EXIT_OK


def run_gradcheck(args) -> int:
    report = check_tiny_model(args.seed if args.seed is not None else 0, args.eps)
    width = max(len(n) for n in report)
    for name, err in report.items():
        print(f"{name:<{width}}  {err:.3e}")
    worst = max(report, key=report.get)
    print(f"max relative error {report[worst]:.3e} ({worst})")
    if not report[worst] < GRADCHECK_TOLERANCE:
        print(f"gradient check FAILED: {worst} error {report[worst]:.3e} "
              f">= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def run_synth(args) -> int:
    if not args.out:
        raise ConfigError("--out is required")
    try:
        paths = write_synthetic_tree(args.out, args.per_class, args.seed or 0, args.noise,
                                     args.split or "train")
    except OSError as exc:
        raise IngestError(f"cannot write synthetic data under {args.out}: {exc}") from exc
    print(f"wrote {len(paths)} images under {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="artifacts directory")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="root/<class>/<images> tree")
    src.add_argument("--synthetic", type=int, metavar="N",
                     help="synthetic bar dataset with N images per class")
    p.add_argument("--noise", type=float, help="synthetic speckle level (default 0.3)")
    p.add_argument("--split", choices=("train", "test"), help="synthetic split")
    p.add_argument("--preprocess", choices=PREPROCESS_MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    _common(p)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warm-start", metavar="PATH")
    p.set_defaults(func=run_train)

    p = sub.add_parser("eval", help="confusion matrix, heatmap and metrics for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--heatmap-format", choices=("ppm", "png"), default="ppm")
    p.add_argument("--heatmap-mode", choices=("row-normalized", "counts"),
                   default="row-normalized")
    p.set_defaults(func=run_eval)

    p = sub.add_parser("predict", help="classify a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--preprocess", choices=PREPROCESS_MODES, default="crop-resize")
    p.set_defaults(func=run_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=run_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic dataset as a PGM tree")
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
