import os
from pathlib import Path

import numpy as np
import pytest

from pnca.nca import LabeledDataset

FIXTURES = Path(__file__).parent / "fixtures"

# MNIST IDX files are not shipped with the repository. Tests that
# reproduce the reference accuracy figures activate only when the real
# dataset is provided, via $PNCA_MNIST_DIR or <repo>/data/mnist.
MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * eps)
    return grad


def two_blobs(n=10, d=4, sep=4.0, seed=0):
    """Linearly separable two-class dataset."""
    rng = np.random.default_rng(seed)
    half = n // 2
    a = rng.normal(size=(half, d)) + sep
    b = rng.normal(size=(n - half, d)) - sep
    x = np.vstack([a, b])
    y = np.array([0] * half + [1] * (n - half))
    return LabeledDataset(x, y, 2)


def random_dataset(n, d, n_classes, seed):
    rng = np.random.default_rng(seed)
    return LabeledDataset(
        rng.normal(size=(n, d)), rng.integers(0, n_classes, size=n), n_classes
    )


def find_mnist():
    candidates = []
    env = os.environ.get("PNCA_MNIST_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for root in candidates:
        if not root.is_dir():
            continue
        found = {}
        for key, names in MNIST_FILES.items():
            for name in names:
                for suffix in ("", ".gz"):
                    p = root / f"{name}{suffix}"
                    if p.is_file():
                        found[key] = p
                        break
                if key in found:
                    break
        if len(found) == len(MNIST_FILES):
            return found
    return None


@pytest.fixture(scope="session")
def fixture_paths():
    return {
        "train_images": FIXTURES / "mini-train-images.idx",
        "train_labels": FIXTURES / "mini-train-labels.idx",
        "test_images": FIXTURES / "mini-test-images.idx",
        "test_labels": FIXTURES / "mini-test-labels.idx",
        "ood_dir": FIXTURES / "ood_letters",
    }
