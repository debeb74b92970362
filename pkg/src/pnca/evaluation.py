"""Confidence-binned evaluation of predictions under shift.

A model's test predictions become :class:`PredictionRecord` rows; the
harness bins them by confidence (the top predicted class probability),
reports per-bin counts and accuracies, aggregates across trials, and
exports reports as JSON or CSV. Exports are byte-deterministic: equal
reports serialise to equal files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PredictionRecord",
    "ConfidenceReport",
    "make_records",
    "confidence_histogram",
    "accuracy",
    "high_confidence_fraction",
    "aggregate_trials",
    "report_to_dict",
    "export_report",
    "DEFAULT_BIN_EDGES",
    "HIGH_CONFIDENCE_THRESHOLD",
]

# Ten equal-width bins; with C classes only bins above 1/C can populate.
DEFAULT_BIN_EDGES = tuple(round(0.1 * i, 1) for i in range(11))

# Reporting threshold for "high confidence" predictions, recorded in
# every export.
HIGH_CONFIDENCE_THRESHOLD = 0.9


@dataclass(frozen=True)
class PredictionRecord:
    """One test prediction: label, confidence, class probabilities."""

    label_pred: int
    confidence: float
    class_probs: np.ndarray
    label_true: int | None = None

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        object.__setattr__(self, "class_probs", probs)
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("class probabilities must sum to one")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if abs(self.confidence - probs.max()) > 1e-9:
            raise ValueError("confidence must be the top class probability")


def make_records(labels, confidences, class_probs, true_labels=None):
    """Bundle prediction arrays into records."""
    n = len(labels)
    out = []
    for i in range(n):
        out.append(
            PredictionRecord(
                label_pred=int(labels[i]),
                confidence=float(confidences[i]),
                class_probs=class_probs[i],
                label_true=None if true_labels is None else int(true_labels[i]),
            )
        )
    return out


@dataclass
class ConfidenceReport:
    """Binned accuracy/count summary of a prediction set.

    ``accuracies`` and ``overall_accuracy`` are ``None`` for unlabelled
    (out-of-distribution) sets; empty labelled bins hold ``None``.
    ``metadata`` carries run identity (model, seed, dataset hash, ...)
    and is merged into exports.
    """

    bin_edges: tuple
    counts: tuple
    accuracies: tuple | None
    overall_accuracy: float | None
    high_confidence_fraction: float
    metadata: dict = field(default_factory=dict)


def confidence_histogram(records, bin_edges=DEFAULT_BIN_EDGES, metadata=None):
    """Bin records by confidence into half-open bins (last bin closed).

    Accuracies are reported when every record carries a true label.
    """
    if not records:
        raise ValueError("no records to bin")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    conf = np.array([r.confidence for r in records])
    if conf.min() < edges[0] or conf.max() > edges[-1]:
        raise ValueError("confidences fall outside the binning range")
    n_bins = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)

    labelled = all(r.label_true is not None for r in records)
    accuracies = None
    overall = None
    if labelled:
        correct = np.array(
            [1.0 if r.label_pred == r.label_true else 0.0 for r in records]
        )
        hits = np.bincount(idx, weights=correct, minlength=n_bins)
        accuracies = tuple(
            float(hits[b] / counts[b]) if counts[b] else None for b in range(n_bins)
        )
        overall = float(correct.mean())
    return ConfidenceReport(
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        accuracies=accuracies,
        overall_accuracy=overall,
        high_confidence_fraction=high_confidence_fraction(records),
        metadata=dict(metadata or {}),
    )


def accuracy(records) -> float:
    """Fraction of records whose prediction matches the true label."""
    if not records or any(r.label_true is None for r in records):
        raise ValueError("accuracy needs true labels on every record")
    hits = sum(1 for r in records if r.label_pred == r.label_true)
    return hits / len(records)


def high_confidence_fraction(records, threshold=HIGH_CONFIDENCE_THRESHOLD) -> float:
    """Fraction of records predicted with confidence above ``threshold``."""
    if not records:
        raise ValueError("no records")
    return sum(1 for r in records if r.confidence > threshold) / len(records)


def aggregate_trials(metric_rows) -> dict:
    """Per-metric mean and sample standard deviation across trials.

    ``metric_rows`` is a list of homogeneous ``{metric: value}`` dicts
    (``None`` values allowed but must be None everywhere). The std uses
    the n-1 denominator; a single trial reports std 0. Values are sorted
    before reduction so the summary is independent of trial order (and
    of the worker count that produced the rows).
    """
    rows = list(metric_rows)
    if not rows:
        raise ValueError("nothing to aggregate")
    keys = sorted(rows[0])
    if any(sorted(r) != keys for r in rows):
        raise ValueError("trial metrics are not homogeneous")
    out = {}
    for key in keys:
        values = [r[key] for r in rows]
        if any(v is None for v in values):
            if not all(v is None for v in values):
                raise ValueError(f"metric {key!r} is only sometimes present")
            out[key] = {"mean": None, "std": None}
            continue
        arr = np.sort(np.asarray(values, dtype=np.float64))
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out[key] = {"mean": float(arr.mean()), "std": std}
    return out


_RESERVED_KEYS = {
    "bins",
    "counts",
    "accuracies",
    "overall_accuracy",
    "high_confidence_threshold",
    "high_confidence_fraction",
}


def report_to_dict(report: ConfidenceReport) -> dict:
    """JSON-ready view of a report.

    Fixed field names: ``bins``, ``counts``, ``accuracies``,
    ``overall_accuracy`` plus metadata keys such as ``model``, ``seed``,
    ``m``, ``latent_dim``, ``kernel_path``, ``dataset``,
    ``dataset_sha256``, ``n_train``. Accuracy fields are omitted (not
    null) for unlabelled sets.
    """
    clash = _RESERVED_KEYS.intersection(report.metadata)
    if clash:
        raise ValueError(f"metadata shadows reserved keys: {sorted(clash)}")
    out = dict(report.metadata)
    out["bins"] = list(report.bin_edges)
    out["counts"] = list(report.counts)
    if report.accuracies is not None:
        out["accuracies"] = list(report.accuracies)
        out["overall_accuracy"] = report.overall_accuracy
    out["high_confidence_threshold"] = HIGH_CONFIDENCE_THRESHOLD
    out["high_confidence_fraction"] = report.high_confidence_fraction
    return out


def export_report(report, path, format: str = "json") -> None:
    """Write a report (or a prebuilt dict) as JSON or per-bin CSV.

    Serialisation is deterministic: keys are sorted and no volatile
    fields (timestamps, paths) are added, so equal reports produce
    byte-identical files.
    """
    data = report_to_dict(report) if isinstance(report, ConfidenceReport) else report
    if format == "json":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(data, fh, sort_keys=True, indent=2)
            fh.write("\n")
    elif format == "csv":
        edges = data["bins"]
        counts = data["counts"]
        accuracies = data.get("accuracies")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_lo", "bin_hi", "count", "accuracy"])
            for b in range(len(counts)):
                acc = "" if accuracies is None or accuracies[b] is None else accuracies[b]
                writer.writerow([edges[b], edges[b + 1], counts[b], acc])
    else:
        raise ValueError(f"unknown format {format!r}")
