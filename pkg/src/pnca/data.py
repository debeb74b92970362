"""Dataset ingestion and distribution-shift construction.

Readers for the IDX image container and for feature CSVs, a directory
loader for out-of-distribution image sets, seeded subsampling, and the
rotation transform used to build shifted test sets. Loaders never emit
NaN/Inf and pixel data is always scaled to [0, 1].
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError
from .nca import LabeledDataset
from .rng import Rng

__all__ = [
    "ImageSet",
    "FeatureSet",
    "load_idx",
    "subsample",
    "rotate_images",
    "load_image_dir",
    "load_features_csv",
    "as_dataset",
    "dataset_sha256",
]

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class ImageSet:
    """Grayscale images (n, h, w) in [0, 1] with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (n, h, w), got {self.images.shape}")
        if self.images.size and (
            not np.all(np.isfinite(self.images))
            or self.images.min() < 0.0
            or self.images.max() > 1.0
        ):
            raise ValueError("pixels must be finite and lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("labels must have one entry per image")
            if len(self.labels) and self.labels.min() < 0:
                raise ValueError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.images.shape[0]


@dataclass
class FeatureSet:
    """Precomputed feature rows with optional labels and column names."""

    X: np.ndarray
    y: np.ndarray | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features contain non-finite entries")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.X.shape[0],):
                raise ValueError("y must have one label per row")

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _read_exact(fh, count, what):
    blob = fh.read(count)
    if len(blob) != count:
        raise FormatError(f"truncated file while reading {what}")
    return blob


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path, labels_path=None) -> ImageSet:
    """Read an IDX image file (and, optionally, its label file).

    Big-endian layout: uint32 magic 2051, then item/row/column counts,
    then row-major uint8 pixels. Label files use magic 2049, an item
    count, and uint8 labels. Gzip-compressed files are detected and
    decompressed transparently. Pixels are scaled by 1/255.
    """
    with _open_maybe_gzip(images_path) as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad image magic {magic}, expected {IDX_IMAGES_MAGIC}"
            )
        n, rows, cols = struct.unpack(">3I", _read_exact(fh, 12, "image dims"))
        raw = _read_exact(fh, n * rows * cols, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols) / 255.0

    labels = None
    if labels_path is not None:
        with _open_maybe_gzip(labels_path) as fh:
            (magic,) = struct.unpack(">I", _read_exact(fh, 4, "label magic"))
            if magic != IDX_LABELS_MAGIC:
                raise FormatError(
                    f"bad label magic {magic}, expected {IDX_LABELS_MAGIC}"
                )
            (n_labels,) = struct.unpack(">I", _read_exact(fh, 4, "label count"))
            if n_labels != n:
                raise FormatError(
                    f"label count {n_labels} does not match image count {n}"
                )
            labels = np.frombuffer(
                _read_exact(fh, n_labels, "label data"), dtype=np.uint8
            ).astype(np.int64)
    return ImageSet(images=images, labels=labels)


def subsample(dataset, n: int, rng: Rng):
    """Uniform sample of ``n`` items without replacement, seeded.

    Selected items keep their original relative order. Works on
    :class:`ImageSet`, :class:`FeatureSet`, and labelled feature
    datasets.
    """
    size = dataset.n
    if n > size:
        raise ValueError(f"cannot sample {n} items from {size}")
    idx = np.sort(rng.generator.choice(size, size=n, replace=False))
    if isinstance(dataset, ImageSet):
        labels = None if dataset.labels is None else dataset.labels[idx]
        return ImageSet(images=dataset.images[idx], labels=labels)
    if isinstance(dataset, FeatureSet):
        y = None if dataset.y is None else dataset.y[idx]
        return FeatureSet(X=dataset.X[idx], y=y, feature_names=dataset.feature_names)
    if isinstance(dataset, LabeledDataset):
        return LabeledDataset(
            X=dataset.X[idx], y=dataset.y[idx], n_classes=dataset.n_classes
        )
    raise TypeError(f"cannot subsample {type(dataset).__name__}")


def rotate_images(images, degrees: float) -> ImageSet:
    """Rotate image content about the centre, counterclockwise positive.

    Counterclockwise is meant visually, with row 0 at the top: a pixel
    right of centre moves towards the top. Resampling is bilinear;
    source coordinates outside the frame contribute zeros; the output is
    clamped to [0, 1]. Accepts an :class:`ImageSet` (labels carried
    over) or a raw (n, h, w) array.
    """
    labels = None
    if isinstance(images, ImageSet):
        labels = images.labels
        images = images.images
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    r_out, c_out = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dx = c_out - cx
    dy = cy - r_out
    src_c = cx + (cos_t * dx + sin_t * dy)
    src_r = cy - (-sin_t * dx + cos_t * dy)

    c0 = np.floor(src_c).astype(np.int64)
    r0 = np.floor(src_r).astype(np.int64)
    fc = src_c - c0
    fr = src_r - r0

    out = np.zeros_like(images)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rs, cs = np.where(inside, rr, 0), np.where(inside, cc, 0)
        out += np.where(inside, weight, 0.0) * images[:, rs, cs]
    np.clip(out, 0.0, 1.0, out=out)
    return ImageSet(images=out, labels=labels)


def load_image_dir(path, size: int = 28) -> ImageSet:
    """Load every readable image under a directory as grayscale.

    Files are taken in sorted name order, converted to luminance
    (ITU-R 601-2 weights 0.299 R + 0.587 G + 0.114 B, PIL mode "L"),
    resized to ``size x size`` with bilinear resampling, and scaled to
    [0, 1]. Unreadable files are skipped; their count is reported via a
    warning. An empty usable set raises :class:`DataError`.
    """
    root = Path(path)
    files = sorted(p for p in root.iterdir() if p.is_file())
    images = []
    skipped = 0
    for file in files:
        try:
            with Image.open(file) as img:
                gray = img.convert("L").resize((size, size), Image.BILINEAR)
                images.append(np.asarray(gray, dtype=np.float64) / 255.0)
        except Exception:
            skipped += 1
    if skipped:
        warnings.warn(f"skipped {skipped} unreadable file(s) under {root}")
    if not images:
        raise DataError(f"no usable images under {root}")
    return ImageSet(images=np.stack(images))


def load_features_csv(path) -> FeatureSet:
    """Read a feature table: comma-separated, UTF-8, header row first.

    A column named ``label`` (any position) becomes the integer targets;
    all other columns must parse as floats. Ragged or non-numeric rows
    raise :class:`FormatError` naming the offending line (the header is
    line 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected a header row")
        label_col = header.index("label") if "label" in header else None
        names = [h for i, h in enumerate(header) if i != label_col]
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: line {line_no} has {len(row)} fields, "
                    f"header has {len(header)}"
                )
            try:
                values = [
                    float(v) for i, v in enumerate(row) if i != label_col
                ]
                if label_col is not None:
                    labels.append(int(row[label_col]))
            except ValueError:
                raise FormatError(f"{path}: non-numeric value on line {line_no}")
            rows.append(values)
    x = np.array(rows, dtype=np.float64) if rows else np.empty((0, len(names)))
    y = np.array(labels, dtype=np.int64) if label_col is not None else None
    return FeatureSet(X=x, y=y, feature_names=names)


def as_dataset(images: ImageSet, n_classes: int | None = None) -> LabeledDataset:
    """Flatten an image set into a labelled feature dataset."""
    if images.labels is None:
        raise ValueError("image set has no labels")
    x = images.images.reshape(images.n, -1)
    return LabeledDataset(X=x, y=images.labels, n_classes=n_classes)


def dataset_sha256(path) -> str:
    """Content hash of a dataset file, or of a directory's files.

    Directories hash the sorted relative names and contents of all
    regular files, so renames and edits both change the digest.
    """
    root = Path(path)
    digest = hashlib.sha256()
    if root.is_dir():
        for file in sorted(p for p in root.rglob("*") if p.is_file()):
            digest.update(str(file.relative_to(root)).encode("utf-8"))
            digest.update(file.read_bytes())
    else:
        digest.update(root.read_bytes())
    return digest.hexdigest()
