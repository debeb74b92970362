#!/usr/bin/env python3
"""Regenerate the bundled test fixtures (deterministic).

Writes a small 10-class IDX image dataset — smooth per-class prototype
patterns with jitter and noise, enough structure for smoke-test training
to make visible progress — plus a directory of rendered letter images
used as an out-of-distribution set. Run from the repository root:

    python tools/make_fixtures.py
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

SIZE = 28
N_CLASSES = 10
N_TRAIN = 200
N_TEST = 100
OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def smooth(field, passes=4):
    for _ in range(passes):
        field = (
            field
            + np.roll(field, 1, 0)
            + np.roll(field, -1, 0)
            + np.roll(field, 1, 1)
            + np.roll(field, -1, 1)
        ) / 5.0
    return field


def prototypes(rng):
    protos = []
    for _ in range(N_CLASSES):
        field = smooth(rng.normal(size=(SIZE, SIZE)))
        field -= field.min()
        field /= field.max()
        protos.append(field)
    return protos


def sample(rng, proto):
    img = np.roll(proto, rng.integers(-2, 3), axis=0)
    img = np.roll(img, rng.integers(-2, 3), axis=1)
    img = img * rng.uniform(0.7, 1.0) + rng.normal(scale=0.08, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def write_idx(images, labels, images_path, labels_path):
    n, rows, cols = images.shape
    pixels = np.round(images * 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", 2051, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", 2049, n))
        fh.write(labels.astype(np.uint8).tobytes())


def make_images(rng, protos, count):
    labels = np.arange(count) % N_CLASSES
    images = np.stack([sample(rng, protos[c]) for c in labels])
    return images, labels


def make_letters(rng, out_dir, count=40):
    out_dir.mkdir(parents=True, exist_ok=True)
    letters = "ABCDEFGHIJ"
    for i in range(count):
        font = ImageFont.load_default(size=int(rng.integers(16, 25)))
        img = Image.new("L", (SIZE, SIZE), 0)
        draw = ImageDraw.Draw(img)
        draw.text(
            (int(rng.integers(2, 9)), int(rng.integers(0, 6))),
            letters[i % len(letters)],
            fill=255,
            font=font,
        )
        img.save(out_dir / f"letter_{i:03d}.png")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240101)
    protos = prototypes(rng)
    train_images, train_labels = make_images(rng, protos, N_TRAIN)
    test_images, test_labels = make_images(rng, protos, N_TEST)
    write_idx(
        train_images,
        train_labels,
        OUT / "mini-train-images.idx",
        OUT / "mini-train-labels.idx",
    )
    write_idx(
        test_images,
        test_labels,
        OUT / "mini-test-images.idx",
        OUT / "mini-test-labels.idx",
    )
    make_letters(np.random.default_rng(20240102), OUT / "ood_letters")
    print(f"fixtures written under {OUT}")


if __name__ == "__main__":
    main()
