"""Command-line entry point: ``ddrid <command> [options]``.

Every command that writes to an output directory leaves a ``manifest.json``
there.  The manifest is written before any work starts and rewritten at the
end, so a crashed run still shows its configuration and inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, default_data_dir, load_config
from .data import (
    SplitConfig,
    dataset_files,
    file_digest,
    load_dataset,
    load_image_file,
    load_prepared,
    one_vs_rest_split,
    preprocess,
    save_prepared,
)
from .errors import ArgumentError, ConfigError, DDRIDError
from .evaluate import emit_roc_plot, read_roc_csv, run_experiment, write_report, write_roc_csv
from .nn import kernels
from .nn.layers import standard_specs
from .score import SCORE_KINDS, scores_for, validation_means, choose_kind, write_score_csv
from .train import derive_seeds, load_model, save_model, train_model, write_loss_log

log = logging.getLogger("ddrid")

TRAIN_FRACTION = 0.9
CHECKPOINT_NAME = "model.ckpt"
LOSS_LOG_NAME = "loss_log.csv"
MANIFEST_NAME = "manifest.json"
PREPARED_NAME = "prepared_{dataset}.npz"


class Manifest:
    """Run manifest kept on disk; ``files`` only lists paths that exist."""

    def __init__(self, out_dir: Path, command: str, cfg: RunConfig | None):
        self.path = out_dir / MANIFEST_NAME
        self.started = time.time()
        self.data = {
            "command": command,
            "status": "running",
            "toolkit_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": kernels.backend(),
            "config": None if cfg is None else cfg.to_dict(),
            "seeds": {},
            "dataset_digests": {},
            "files": {},
            "timings": {},
        }
        self.write()

    def add_file(self, role: str, path: Path) -> None:
        self.data["files"][role] = str(path)

    def time(self, label: str, seconds: float) -> None:
        self.data["timings"][label] = round(seconds, 3)

    def write(self) -> None:
        missing = [p for p in self.data["files"].values() if not Path(p).exists()]
        if missing:
            raise DDRIDError(f"manifest would reference missing files: {missing}")
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def finalize(self) -> None:
        self.data["status"] = "complete"
        self.time("total_seconds", time.time() - self.started)
        self.write()


def _digests(dataset: str, data_dir) -> dict[str, str]:
    files = dataset_files(dataset, data_dir)
    return {str(p): file_digest(p) for group in files.values() for p in group}


def _out_dir(path: Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, key in (
        ("seed", "seed"),
        ("normal_class", "normal_class"),
        ("rounds", "rounds"),
        ("test_subset_size", "test_subset_size"),
        ("output_dir", "output_dir"),
        ("data_dir", "data_dir"),
        ("dataset", "dataset"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    policy = getattr(args, "score_kind", None)
    if policy is not None and args.command == "evaluate":
        overrides["kind_policy"] = policy
    for item in getattr(args, "set", None) or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "--set expects key=value")
        overrides[key.strip()] = value
    return apply_overrides(cfg, overrides)


def _datasets(cfg: RunConfig):
    """Raw (train, test) sets plus cached preprocessed stacks when present."""
    train, test = load_dataset(cfg.dataset, cfg.data_dir)
    cache = Path(cfg.data_dir) / PREPARED_NAME.format(dataset=cfg.dataset)
    pre = None
    if cache.exists():
        arrays = load_prepared(cache)
        if np.array_equal(arrays["train_labels"], train.labels) and np.array_equal(arrays["test_labels"], test.labels):
            pre = (arrays["train_images"], arrays["test_images"])
            log.info("using preprocessed cache %s", cache)
    return train, test, pre


# --- commands --------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.output) if args.output else Path(cfg.data_dir) / PREPARED_NAME.format(dataset=cfg.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    train, test = load_dataset(cfg.dataset, cfg.data_dir)
    save_prepared(out, train, test)
    log.info("wrote %s (%d train, %d test images) in %.1fs", out, len(train), len(test), time.time() - t0)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg.output_dir)
    manifest = Manifest(out, "train", cfg)
    manifest.data["dataset_digests"] = _digests(cfg.dataset, cfg.data_dir)
    manifest.data["seeds"] = {"split": cfg.train.seed, **derive_seeds(cfg.train.seed)}
    manifest.write()

    t0 = time.time()
    all_train, all_test, pre = _datasets(cfg)
    train, val, _ = one_vs_rest_split(all_train, all_test, cfg.normal_class,
                                      SplitConfig(TRAIN_FRACTION, cfg.train.seed), preprocessed=pre)
    manifest.time("load_seconds", time.time() - t0)
    log.info("normal class %d: %d train / %d validation images", cfg.normal_class, len(train), len(val))

    t0 = time.time()
    model = train_model(train, cfg.train, standard_specs(cfg.dataset))
    manifest.time("train_seconds", time.time() - t0)

    means = validation_means(model, val)
    model.score_kind = choose_kind(means["latent"], means["reconstruction"])
    model.meta.update({
        "dataset": cfg.dataset,
        "normal_class": cfg.normal_class,
        "split_seed": cfg.train.seed,
        "train_fraction": TRAIN_FRACTION,
        "validation_means": means,
    })
    ckpt = out / CHECKPOINT_NAME
    save_model(model, ckpt)
    loss_log = out / LOSS_LOG_NAME
    write_loss_log(model.loss_history, loss_log)
    manifest.add_file("checkpoint", ckpt)
    manifest.add_file("loss_log", loss_log)
    manifest.data["score_kind"] = model.score_kind
    manifest.data["validation_means"] = means
    manifest.data["warnings"] = model.warnings
    manifest.finalize()
    log.info("selected %s score (validation means %s); checkpoint %s", model.score_kind, means, ckpt)
    return 0


def _score_inputs(args, model):
    """Preprocessed images, class ids and normal flags for ``score``."""
    normal_class = model.meta.get("normal_class")
    if args.input:
        raw = load_image_file(args.input, args.labels)
        labels = raw.labels if args.labels or raw.labels.min() >= 0 else None
        flags = None if labels is None or normal_class is None else labels == normal_class
        return preprocess(raw.pixels), labels, flags
    # a subset of the dataset the checkpoint was trained for
    dataset = model.meta.get("dataset")
    if dataset is None or normal_class is None:
        raise ArgumentError("checkpoint lacks dataset metadata; pass --input")
    data_dir = args.data_dir or default_data_dir()
    all_train, all_test = load_dataset(dataset, data_dir)
    split = SplitConfig(model.meta.get("train_fraction", TRAIN_FRACTION), model.meta.get("split_seed", 0))
    train, val, test = one_vs_rest_split(all_train, all_test, normal_class, split,
                                         test_subset_size=args.test_subset_size)
    chosen = {"train": train, "validation": val, "test": test}[args.subset]
    flags = chosen.normal_flags if chosen.normal_flags is not None else np.ones(len(chosen), bool)
    return chosen.images, chosen.class_ids, flags


def cmd_score(args) -> int:
    if not args.input and not args.subset:
        raise ArgumentError("score needs --input or --subset")
    model = load_model(args.checkpoint)
    kind = args.score_kind or model.score_kind
    if kind is None:
        raise ArgumentError("checkpoint records no score kind; pass --score-kind")
    if kind not in SCORE_KINDS:
        raise ArgumentError(f"unknown score kind {kind!r}")
    images, labels, flags = _score_inputs(args, model)
    scores = scores_for(model, kind, images)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_score_csv(out, scores, kind, labels, flags)
    log.info("scored %d images with %s score -> %s", len(scores), kind, out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg.output_dir)
    manifest = Manifest(out, "evaluate", cfg)
    manifest.data["dataset_digests"] = _digests(cfg.dataset, cfg.data_dir)
    manifest.data["seeds"] = {
        f"round_{r}": {"split": cfg.train.seed + r, **derive_seeds(cfg.train.seed + r)} for r in range(cfg.rounds)
    }
    manifest.write()

    all_train, all_test, pre = _datasets(cfg)
    curves = []

    def on_round(result, artifacts):
        path = out / f"roc_round{result.round_index}.csv"
        write_roc_csv(artifacts.curve, path)
        manifest.add_file(f"roc_round{result.round_index}", path)
        if args.save_checkpoints:
            ckpt = out / f"model_round{result.round_index}.ckpt"
            save_model(artifacts.model, ckpt)
            manifest.add_file(f"checkpoint_round{result.round_index}", ckpt)
        manifest.time(f"round{result.round_index}_train_seconds", result.train_seconds)
        manifest.write()
        curves.append(artifacts.curve)

    report = run_experiment(
        (all_train, all_test), cfg.normal_class, cfg.rounds, cfg.train, cfg.kind_policy,
        dataset_kind=cfg.dataset, test_subset_size=cfg.test_subset_size,
        train_fraction=TRAIN_FRACTION, preprocessed=pre, on_round=on_round,
    )
    report_path = out / "report.json"
    write_report(report, report_path)
    plot_path = emit_roc_plot(curves, [f"round {i} (AUC {a:.4f})" for i, a in enumerate(report.per_round_auc)],
                              out / "roc.svg")
    manifest.add_file("report", report_path)
    manifest.add_file("roc_plot", plot_path)
    manifest.data["mean_auc"] = report.mean_auc
    manifest.finalize()
    print(json.dumps({"mean_auc": report.mean_auc, "per_round_auc": report.per_round_auc,
                      "score_kind_chosen": report.score_kind_chosen}))
    return 0


def cmd_plot_roc(args) -> int:
    curves = [read_roc_csv(p) for p in args.csv]
    labels = args.labels or [Path(p).stem for p in args.csv]
    emit_roc_plot(curves, labels, args.output)
    return 0


# --- argument parsing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as a single diagnostic line."""

    def error(self, message):
        print("ddrid: " + json.dumps({"error": "UsageError", "message": message}, sort_keys=True), file=sys.stderr)
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddrid", description="One-class anomaly detection with dual reconstruction networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_options(p, score_kind_help=None):
        p.add_argument("--config", type=Path, help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--normal-class", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--test-subset-size", type=int)
        p.add_argument("--output-dir", type=Path)
        p.add_argument("--data-dir", type=Path, help="defaults to $DDRID_DATA_DIR")
        p.add_argument("--dataset", choices=("mnist", "cifar10"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if score_kind_help:
            p.add_argument("--score-kind", choices=("algorithm2", *SCORE_KINDS), help=score_kind_help)

    p = sub.add_parser("prepare-data", help="parse and preprocess a dataset into a cache file")
    run_options(p)
    p.add_argument("--output", type=Path, help="cache path (default: <data-dir>/prepared_<dataset>.npz)")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train one model and write checkpoint, loss log and manifest")
    run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write per-image anomaly scores as CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, help="IDX or CIFAR binary image file")
    p.add_argument("--labels", type=Path, help="IDX label file matching --input")
    p.add_argument("--subset", choices=("train", "validation", "test"),
                   help="score a subset of the checkpoint's own dataset split instead of --input")
    p.add_argument("--data-dir", type=Path)
    p.add_argument("--test-subset-size", type=int)
    p.add_argument("--score-kind", choices=SCORE_KINDS, help="default: the kind selected at training time")
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="run the multi-round one-vs-rest protocol")
    run_options(p, score_kind_help="score kind policy (default from config: algorithm2)")
    p.add_argument("--save-checkpoints", action="store_true", help="also keep each round's checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-roc", help="render ROC CSV files into one SVG plot")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_plot_roc)
    return parser


def _diagnostic(exc: BaseException) -> str:
    record = {"error": type(exc).__name__, "message": str(exc).splitlines()[0] if str(exc) else ""}
    if isinstance(exc, ConfigError):
        record["field"] = exc.field
    if isinstance(exc, OSError) and exc.filename:
        record["path"] = str(exc.filename)
    for note in getattr(exc, "__notes__", ()):
        record.setdefault("context", note)
    return "ddrid: " + json.dumps(record, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError) as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return 2
    except (DDRIDError, OSError, ValueError, ArithmeticError) as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
