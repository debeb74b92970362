"""Command-line front end wiring data, models, and evaluation together.

Subcommands:

* ``run``     train a model over several seeded trials and evaluate it on
              clean, rotated, and out-of-distribution test data;
* ``report``  convert a JSON report to per-bin CSV;
* ``inspect`` print metadata for a dataset or model file.

Flags override config-file values, which override defaults. Reports are
deterministic byte for byte given (config, seed); trials may run in
parallel (``PNCA_THREADS``) without changing any output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, data, evaluation, probabilistic
from .errors import DataError, FormatError, NumericError, PncaError
from .mlp import PARAMS_MAGIC, MlpSpec
from .nca import LabeledDataset, predict_nca, train_nca
from .probabilistic import ENSEMBLE_MAGIC, predict_pnca, resolve_kernel_path, train_pnca
from .rng import seeded_rng

__all__ = ["RunConfig", "parse_config", "run_experiment", "main"]

MODELS = ("dnn", "bnn", "ensemble", "nca", "pnca")


@dataclass
class RunConfig:
    """Fully resolved settings for one ``run`` invocation."""

    model: str
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    ood_dir: str | None = None
    output: str = "reports"
    n_train: int = 100
    seed: int = 0
    trials: int = 10
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 20
    particles: int = 20
    ensemble_size: int = 5
    latent_dim: int = 10
    hidden_dims: str = "200,200"
    kernel_path: str = "auto"
    orf_features: int | None = None
    prior_std: float = 1.0
    rotate: float = 60.0

    def hidden(self) -> tuple[int, ...]:
        if not self.hidden_dims.strip():
            return ()
        return tuple(int(v) for v in self.hidden_dims.split(","))


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnca",
        description="Sample-efficient uncertainty-aware classification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate a model over trials")
    run.add_argument("--config", help="JSON config file (keys = flags, underscored)")
    run.add_argument("--model", choices=MODELS)
    for name in (
        "train-images",
        "train-labels",
        "test-images",
        "test-labels",
        "train-csv",
        "test-csv",
        "ood-dir",
        "output",
        "hidden-dims",
        "kernel-path",
    ):
        run.add_argument(f"--{name}")
    for name in (
        "n-train",
        "seed",
        "trials",
        "epochs",
        "batch-size",
        "particles",
        "ensemble-size",
        "latent-dim",
        "orf-features",
    ):
        run.add_argument(f"--{name}", type=int)
    for name in ("lr", "prior-std", "rotate"):
        run.add_argument(f"--{name}", type=float)

    rep = sub.add_parser("report", help="convert a JSON report to per-bin CSV")
    rep.add_argument("input")
    rep.add_argument("output")

    ins = sub.add_parser("inspect", help="print dataset or model metadata")
    ins.add_argument("path")
    ins.add_argument("--labels", help="IDX label file paired with an image file")
    return parser


def parse_config(argv) -> RunConfig:
    """Resolve a ``run`` command line into a validated config."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command != "run":
        raise ValueError("parse_config only handles run invocations")
    return _resolve_run_config(parser, args)


def _resolve_run_config(parser, args) -> RunConfig:
    values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            parser.error(f"--config: {exc}")
        except json.JSONDecodeError as exc:
            parser.error(f"--config: invalid JSON ({exc})")
        for key, value in loaded.items():
            if key not in _FIELDS:
                parser.error(f"--config: unknown key {key!r}")
            values[key] = value
    for key in _FIELDS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = flag_value

    if "model" not in values:
        parser.error("--model is required")
    try:
        config = RunConfig(**values)
    except TypeError as exc:
        parser.error(str(exc))

    def check(cond, flag, message):
        if not cond:
            parser.error(f"--{flag}: {message}")

    check(config.model in MODELS, "model", f"must be one of {', '.join(MODELS)}")
    check(config.epochs >= 1, "epochs", "must be at least 1")
    check(config.trials >= 1, "trials", "must be at least 1")
    check(config.n_train >= 2, "n-train", "must be at least 2")
    check(config.batch_size >= 1, "batch-size", "must be at least 1")
    check(config.particles >= 1, "particles", "must be at least 1")
    check(config.ensemble_size >= 1, "ensemble-size", "must be at least 1")
    check(config.latent_dim >= 1, "latent-dim", "must be at least 1")
    check(config.lr > 0, "lr", "must be positive")
    check(config.prior_std > 0, "prior-std", "must be positive")
    check(config.seed >= 0, "seed", "must be nonnegative")
    check(
        config.kernel_path in ("auto", "exact", "orf"),
        "kernel-path",
        "must be auto, exact, or orf",
    )
    if config.orf_features is not None:
        check(
            config.orf_features >= 2 and config.orf_features % 2 == 0,
            "orf-features",
            "must be even and at least 2",
        )
    try:
        hidden = config.hidden()
        check(all(h >= 1 for h in hidden), "hidden-dims", "dims must be positive")
    except ValueError:
        parser.error("--hidden-dims: expected comma-separated integers")
    has_idx = config.train_images and config.test_images
    has_csv = config.train_csv and config.test_csv
    check(
        bool(has_idx) != bool(has_csv),
        "train-images",
        "provide either IDX image/label paths or train/test CSVs",
    )
    if has_idx:
        check(bool(config.train_labels), "train-labels", "required with IDX input")
        check(bool(config.test_labels), "test-labels", "required with IDX input")
    return config


def _load_datasets(config: RunConfig):
    """Returns (train, test, test image set or None, train content hash)."""
    if config.train_csv:
        train_fs = data.load_features_csv(config.train_csv)
        test_fs = data.load_features_csv(config.test_csv)
        if train_fs.y is None or test_fs.y is None:
            raise DataError("training and test CSVs need a label column")
        n_classes = int(max(train_fs.y.max(), test_fs.y.max())) + 1
        train = LabeledDataset(train_fs.X, train_fs.y, n_classes)
        test = LabeledDataset(test_fs.X, test_fs.y, n_classes)
        return train, test, None, data.dataset_sha256(config.train_csv)
    train_set = data.load_idx(config.train_images, config.train_labels)
    test_set = data.load_idx(config.test_images, config.test_labels)
    n_classes = int(max(train_set.labels.max(), test_set.labels.max())) + 1
    train = data.as_dataset(train_set, n_classes)
    test = data.as_dataset(test_set, n_classes)
    return train, test, test_set, data.dataset_sha256(config.train_images)


def _model_spec(config: RunConfig, n_inputs: int, n_classes: int) -> MlpSpec:
    hidden = config.hidden()
    out = config.latent_dim if config.model in ("nca", "pnca") else n_classes
    return MlpSpec((n_inputs, *hidden, out))


def _fit_and_predictor(config: RunConfig, spec, train_subset, sub_seed):
    """Train the configured model; returns a records-producing closure."""
    model = config.model
    if model == "nca":
        params, _ = train_nca(
            spec, train_subset, epochs=config.epochs, lr=config.lr, seed=sub_seed
        )
        return lambda x: predict_nca(spec, params, train_subset, x)
    if model == "pnca":
        ensemble, _ = train_pnca(
            spec,
            train_subset,
            particles=config.particles,
            epochs=config.epochs,
            lr=config.lr,
            seed=sub_seed,
            path=config.kernel_path,
            orf_features=config.orf_features,
        )
        return lambda x: predict_pnca(
            spec,
            ensemble,
            train_subset,
            x,
            path=config.kernel_path,
            orf_features=config.orf_features,
            seed=sub_seed,
        )
    if model == "dnn":
        clf = baselines.train_dnn(
            spec,
            train_subset,
            epochs=config.epochs,
            lr=config.lr,
            batch_size=config.batch_size,
            seed=sub_seed,
        )
        return lambda x: baselines.predict_softmax(clf, x)
    if model == "ensemble":
        members = baselines.train_ensemble(
            spec,
            train_subset,
            size=config.ensemble_size,
            epochs=config.epochs,
            lr=config.lr,
            batch_size=config.batch_size,
            seed=sub_seed,
        )
        return lambda x: baselines.predict_softmax(members, x)
    if model == "bnn":
        bnn = baselines.train_bnn(
            spec,
            train_subset,
            particles=config.particles,
            prior_std=config.prior_std,
            epochs=config.epochs,
            lr=config.lr,
            batch_size=config.batch_size,
            seed=sub_seed,
        )
        return lambda x: baselines.predict_softmax(bnn, x)
    raise ValueError(f"unknown model {model!r}")


def _run_trial(config, trial, train, test, test_images, ood_set, dataset_hash):
    sub_seed = config.seed ^ trial
    rng = seeded_rng(sub_seed)
    train_subset = data.subsample(train, config.n_train, rng.child("subsample"))
    spec = _model_spec(config, train.X.shape[1], train.n_classes)
    predictor = _fit_and_predictor(config, spec, train_subset, sub_seed)

    n_members = {
        "pnca": config.particles,
        "bnn": config.particles,
        "ensemble": config.ensemble_size,
    }.get(config.model, 1)
    metadata = {
        "model": config.model,
        "seed": sub_seed,
        "m": n_members,
        "latent_dim": config.latent_dim if config.model in ("nca", "pnca") else None,
        "kernel_path": (
            resolve_kernel_path(config.n_train, config.particles, config.kernel_path)
            if config.model == "pnca"
            else None
        ),
        "dataset": config.train_images or config.train_csv,
        "dataset_sha256": dataset_hash,
        "n_train": config.n_train,
        "trial": trial,
        "config": dataclasses.asdict(config),
    }

    splits = {}
    labels, conf, probs = predictor(test.X)
    records = evaluation.make_records(labels, conf, probs, test.y)
    splits["clean"] = evaluation.confidence_histogram(
        records, metadata={**metadata, "split": "clean"}
    )
    if config.rotate and test_images is not None:
        rotated = data.rotate_images(test_images, config.rotate)
        x_rot = rotated.images.reshape(rotated.n, -1)
        labels, conf, probs = predictor(x_rot)
        records = evaluation.make_records(labels, conf, probs, rotated.labels)
        splits["rotated"] = evaluation.confidence_histogram(
            records, metadata={**metadata, "split": "rotated", "rotate": config.rotate}
        )
    if ood_set is not None:
        x_ood = ood_set.images.reshape(ood_set.n, -1)
        labels, conf, probs = predictor(x_ood)
        records = evaluation.make_records(labels, conf, probs)
        splits["ood"] = evaluation.confidence_histogram(
            records,
            metadata={
                **metadata,
                "split": "ood",
                "ood_dir": config.ood_dir,
                "ood_sha256": data.dataset_sha256(config.ood_dir),
            },
        )
    return splits


def run_experiment(config: RunConfig) -> int:
    """Execute the configured trials; returns a process exit code."""
    try:
        train, test, test_images, dataset_hash = _load_datasets(config)
        if config.n_train > train.n:
            raise DataError(
                f"n_train={config.n_train} exceeds the {train.n} training rows"
            )
        ood_set = data.load_image_dir(config.ood_dir) if config.ood_dir else None
    except (FormatError, DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(config.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        workers = max(1, int(os.environ.get("PNCA_THREADS", "1")))
    except ValueError:
        print("error: PNCA_THREADS must be an integer", file=sys.stderr)
        return 1

    def job(trial):
        return _run_trial(
            config, trial, train, test, test_images, ood_set, dataset_hash
        )

    try:
        if workers == 1:
            results = [job(t) for t in range(config.trials)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(job, range(config.trials)))
    except NumericError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return 2
    except (FormatError, DataError, OSError, ValueError, PncaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    metrics = []
    for trial, splits in enumerate(results):
        row = {}
        for split, report in splits.items():
            evaluation.export_report(
                report, out_dir / f"trial{trial:02d}_{split}.json"
            )
            row[f"{split}_accuracy"] = report.overall_accuracy
            row[f"{split}_high_confidence_fraction"] = report.high_confidence_fraction
        metrics.append(row)
    summary = {
        "config": dataclasses.asdict(config),
        "trials": config.trials,
        "metrics": evaluation.aggregate_trials(metrics),
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {len(results)} trial report set(s) to {out_dir}")
    return 0


def _inspect(path: str, labels: str | None) -> int:
    target = Path(path)
    if not target.exists():
        print(f"error: {path} does not exist", file=sys.stderr)
        return 1
    if target.is_dir():
        images = data.load_image_dir(target)
        print(f"image directory: {images.n} images {images.images.shape[1:]}")
        print(f"sha256: {data.dataset_sha256(target)}")
        return 0
    head = target.read_bytes()[:8]
    if head.startswith(ENSEMBLE_MAGIC):
        spec, ensemble = probabilistic.load_ensemble(target)
        print(f"particle ensemble: m={ensemble.m}, layer dims {spec.layer_dims}")
        return 0
    if head.startswith(PARAMS_MAGIC):
        from .mlp import load_params

        spec, params = load_params(target)
        print(f"parameter vector: {params.size} values, layer dims {spec.layer_dims}")
        return 0
    if target.suffix == ".csv":
        fs = data.load_features_csv(target)
        labelled = "labelled" if fs.y is not None else "unlabelled"
        print(f"feature csv: {fs.n} rows x {fs.X.shape[1]} columns, {labelled}")
        print(f"sha256: {data.dataset_sha256(target)}")
        return 0
    images = data.load_idx(target, labels)
    print(f"idx images: {images.n} x {images.images.shape[1]}x{images.images.shape[2]}")
    if images.labels is not None:
        hist = np.bincount(images.labels)
        print(f"label histogram: {hist.tolist()}")
    print(f"sha256: {data.dataset_sha256(target)}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return run_experiment(_resolve_run_config(parser, args))
        if args.command == "report":
            with open(args.input, encoding="utf-8") as fh:
                evaluation.export_report(json.load(fh), args.output, format="csv")
            return 0
        if args.command == "inspect":
            return _inspect(args.path, args.labels)
    except (FormatError, DataError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
