"""Neighbourhood component analysis over a learned embedding.

Each point selects a neighbour with probability proportional to
``exp(-||z_i - z_j||^2)`` (never itself); training minimises the negative
log probability of selecting a same-class neighbour, full batch, with
the shared Nesterov-Adam optimizer.

The selection softmax and its gradient are implemented once, over
"blocks" of embeddings: point ``i`` may carry ``m`` embeddings (one per
weight sample) and the kernel between points is the average over the
``m x m`` cross terms. Deterministic NCA is exactly the ``m = 1`` case,
so the probabilistic generalisation reuses this core verbatim, and its
single-sample reduction is an identity rather than an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .kernels import pairwise_sq_dists
from .mlp import MlpSpec, NadamState, forward, init_params, nadam_step, vjp
from .rng import Rng, seeded_rng

__all__ = [
    "LOSS_FLOOR",
    "LabeledDataset",
    "onehot",
    "selection_probs",
    "class_posterior",
    "nca_loss",
    "nca_param_grad",
    "train_nca",
    "predict_nca",
]

# Floor inside the log of the loss; keeps points with no same-class
# neighbour from producing an infinite loss.
LOSS_FLOOR = 1e-12


@dataclass
class LabeledDataset:
    """Feature matrix (n, d) with integer labels in [0, n_classes)."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("y must have one label per row of X")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains non-finite entries")
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1 if len(self.y) else 0
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return self.X.shape[0]


def onehot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def _block_probs(d: np.ndarray, n: int, m: int):
    """Selection probabilities from blockwise squared distances.

    ``d`` is the (n m, n m) matrix of squared distances between all
    embeddings, row/column index ``p = i * m + l``. Returns
    ``(g, k, r, q)`` where ``g`` is the row-block-stabilised Gram of
    ``exp(-d)`` with within-block entries zeroed, ``k`` the scaled
    inter-point kernel (zero diagonal), ``r`` its row sums and ``q`` the
    row-normalised selection matrix.

    Each row block is shifted by its smallest cross-block distance before
    exponentiation (the usual softmax max-subtraction, applied blockwise)
    so no row can underflow to zero; the shift cancels from ``q``.
    """
    p = n * m
    if d.shape != (p, p):
        raise ValueError(f"distance matrix has shape {d.shape}, expected {(p, p)}")
    blocks = d.reshape(n, m, n, m)
    block_min = blocks.min(axis=(1, 3))
    cross = block_min.copy()
    np.fill_diagonal(cross, np.inf)
    shift = cross.min(axis=1)

    expo = np.repeat(shift, m)[:, None] - d
    view = expo.reshape(n, m, n, m)
    idx = np.arange(n)
    view[idx, :, idx, :] = -np.inf
    g = np.exp(expo)

    k = g.reshape(n, m, n, m).sum(axis=(1, 3)) / (m * m)
    np.fill_diagonal(k, 0.0)
    r = k.sum(axis=1)
    q = k / r[:, None]
    return g, k, r, q


def _selection_nll_grad(d: np.ndarray, n: int, m: int, y: np.ndarray):
    """Loss, selection matrix, and pairwise distance gradient.

    Returns ``(loss, q, qi, coeff)`` where ``coeff`` is the symmetric
    (n m, n m) matrix of d loss / d distance; the gradient with respect
    to the flattened embeddings ``e`` is then
    ``2 (coeff.sum(1)[:, None] * e - coeff @ e)``.
    """
    g, k, r, q = _block_probs(d, n, m)
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    qi = np.where(same, q, 0.0).sum(axis=1)
    loss = float(-np.log(np.maximum(qi, LOSS_FLOOR)).sum())

    active = qi > LOSS_FLOOR
    qi_safe = np.where(active, qi, 1.0)
    c = (1.0 - same / qi_safe[:, None]) / r[:, None]
    c[~active] = 0.0
    np.fill_diagonal(c, 0.0)

    c_pairs = np.repeat(np.repeat(c, m, axis=0), m, axis=1)
    w = -(g * c_pairs) / (m * m)
    coeff = w + w.T
    return loss, q, qi, coeff


def _embedding_grad(coeff: np.ndarray, e: np.ndarray) -> np.ndarray:
    """d loss / d embeddings given the pairwise distance coefficients."""
    return 2.0 * (coeff.sum(axis=1)[:, None] * e - coeff @ e)


def _cross_probs(d: np.ndarray, n_ref: int, m: int) -> np.ndarray:
    """Row-normalised kernel weights from query blocks to reference points.

    ``d`` is (t m, n_ref m); queries select among all references (a query
    is not a reference, so nothing is excluded). Stabilised per query
    like :func:`_block_probs`.
    """
    t = d.shape[0] // m
    blocks = d.reshape(t, m, n_ref, m)
    shift = blocks.min(axis=(1, 2, 3))
    g = np.exp(np.repeat(shift, m)[:, None] - d)
    k = g.reshape(t, m, n_ref, m).sum(axis=(1, 3)) / (m * m)
    return k / k.sum(axis=1)[:, None]


def selection_probs(z: np.ndarray) -> np.ndarray:
    """Neighbour-selection matrix of an embedded batch.

    ``q[i, j]`` is the softmax over ``-||z_i - z_j||^2`` for ``j != i``
    (row-wise max-subtracted for overflow safety); the diagonal is zero
    and rows sum to one.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("selection_probs needs at least two embedded points")
    *_, q = _block_probs(pairwise_sq_dists(z), z.shape[0], 1)
    return q


def class_posterior(q: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class selection mass: entry (i, c) sums q[i, j] over y_j = c."""
    return q @ onehot(y, n_classes)


def nca_loss(q: np.ndarray, y: np.ndarray) -> float:
    """Negative log-likelihood of selecting a same-class neighbour.

    The same-class mass is floored at ``LOSS_FLOOR`` inside the log, so a
    point with no same-class neighbour contributes a large finite value.
    """
    y = np.asarray(y, dtype=np.int64)
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    qi = np.where(same, q, 0.0).sum(axis=1)
    return float(-np.log(np.maximum(qi, LOSS_FLOOR)).sum())


def nca_param_grad(spec: MlpSpec, params: np.ndarray, data: LabeledDataset):
    """Loss and analytic parameter gradient on a full batch."""
    if data.n < 2:
        raise ValueError("need at least two points")
    z, cache = forward(spec, params, data.X)
    d = pairwise_sq_dists(z)
    loss, _, _, coeff = _selection_nll_grad(d, data.n, 1, data.y)
    upstream = _embedding_grad(coeff, z)
    grad, _ = vjp(spec, params, cache, upstream)
    return loss, grad


def train_nca(
    spec: MlpSpec,
    data: LabeledDataset,
    *,
    epochs: int = 100,
    lr: float = 1e-3,
    seed: int | Rng = 0,
):
    """Full-batch training; returns ``(params, loss_history)``.

    ``loss_history[t]`` is the loss at the parameters entering epoch
    ``t``. Aborts with :class:`NumericError` (carrying the last finite
    parameters) if the loss or gradient leaves the finite range.
    """
    if data.n < 2:
        raise ValueError("training needs at least two points")
    rng = seed if isinstance(seed, Rng) else seeded_rng(seed)
    params = init_params(spec, rng.child("init", 0))
    state = NadamState.zeros_like(params)
    history = np.empty(epochs)
    last_finite = params
    for epoch in range(epochs):
        loss, grad = nca_param_grad(spec, params, data)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericError(
                f"non-finite loss/gradient at epoch {epoch}", checkpoint=last_finite
            )
        last_finite = params
        history[epoch] = loss
        params, state = nadam_step(state, params, grad, lr)
    if not np.all(np.isfinite(params)):
        raise NumericError(
            "non-finite parameters after final epoch", checkpoint=last_finite
        )
    return params, history


def predict_nca(
    spec: MlpSpec, params: np.ndarray, train: LabeledDataset, x_test: np.ndarray
):
    """Classify test points against an embedded training set.

    Each test point distributes selection mass over all training points
    (softmax over the latent kernel; nothing is excluded because the test
    point is not in the reference set). Returns ``(labels, confidences,
    class_probs)``; ties go to the smallest class index and confidence is
    the top class probability.
    """
    if train.n == 0:
        raise ValueError("empty training set")
    z_train, _ = forward(spec, params, train.X)
    z_test, _ = forward(spec, params, x_test)
    d = pairwise_sq_dists(z_test, z_train)
    q = _cross_probs(d, train.n, 1)
    probs = class_posterior(q, train.y, train.n_classes)
    labels = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    return labels, conf, probs
