"""Comparison models sharing the MLP core.

* plain softmax classifier trained with minibatch cross-entropy,
* a deep ensemble of independently seeded classifiers whose predictive
  distribution is the mean member softmax,
* a Bayesian network whose weight posterior is approximated by Stein
  variational gradient descent over a particle set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .kernels import Bandwidth, median_bandwidth, param_rbf_matrix
from .mlp import MlpSpec, NadamState, forward, init_params, nadam_step, vjp
from .nca import LabeledDataset, onehot
from .rng import Rng, seeded_rng

__all__ = [
    "SoftmaxClassifier",
    "BnnEnsemble",
    "softmax",
    "train_dnn",
    "train_ensemble",
    "svgd_update",
    "train_bnn",
    "mean_softmax_predict",
    "predict_softmax",
]


@dataclass
class SoftmaxClassifier:
    """A trained network whose outputs are class logits."""

    spec: MlpSpec
    params: np.ndarray


@dataclass
class BnnEnsemble:
    """Posterior weight samples of a Bayesian classifier."""

    spec: MlpSpec
    weights: np.ndarray
    prior_std: float = 1.0

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if not self.prior_std > 0:
            raise ValueError(f"prior_std must be positive, got {self.prior_std}")

    @property
    def m(self) -> int:
        return self.weights.shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _batches(n: int, batch_size: int, shuffle_rng: Rng, epochs: int):
    """Yield per-epoch lists of index batches, reshuffled each epoch."""
    gen = shuffle_rng.generator
    for _ in range(epochs):
        perm = gen.permutation(n)
        yield [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_classifier_spec(spec: MlpSpec, data: LabeledDataset):
    if spec.n_outputs != data.n_classes:
        raise ValueError(
            f"spec outputs {spec.n_outputs} classes, data has {data.n_classes}"
        )


def train_dnn(
    spec: MlpSpec,
    data: LabeledDataset,
    *,
    epochs: int = 100,
    lr: float = 1e-3,
    batch_size: int = 20,
    seed: int | Rng = 0,
) -> SoftmaxClassifier:
    """Minibatch cross-entropy training; returns the fitted classifier.

    Batches are consecutive slices of a fresh seeded permutation each
    epoch (numpy's Fisher-Yates shuffle); the final short batch is kept.
    """
    _check_classifier_spec(spec, data)
    if data.n < 1:
        raise ValueError("training needs at least one point")
    rng = seed if isinstance(seed, Rng) else seeded_rng(seed)
    params = init_params(spec, rng.child("init", 0))
    state = NadamState.zeros_like(params)
    targets = onehot(data.y, data.n_classes)
    last_finite = params
    for batches in _batches(data.n, batch_size, rng.child("shuffle"), epochs):
        for idx in batches:
            logits, cache = forward(spec, params, data.X[idx])
            probs = softmax(logits)
            upstream = (probs - targets[idx]) / len(idx)
            grad, _ = vjp(spec, params, cache, upstream)
            if not np.all(np.isfinite(grad)):
                raise NumericError("non-finite gradient", checkpoint=last_finite)
            last_finite = params
            params, state = nadam_step(state, params, grad, lr)
    if not np.all(np.isfinite(params)):
        raise NumericError(
            "non-finite parameters after final step", checkpoint=last_finite
        )
    return SoftmaxClassifier(spec=spec, params=params)


def train_ensemble(
    spec: MlpSpec,
    data: LabeledDataset,
    *,
    size: int = 5,
    epochs: int = 100,
    lr: float = 1e-3,
    batch_size: int = 20,
    seed: int | Rng = 0,
    member_seeds=None,
) -> list[SoftmaxClassifier]:
    """Independently train ``size`` classifiers from distinct sub-seeds.

    ``member_seeds`` overrides the per-member seeds (used to force
    identical members in tests).
    """
    if size < 1:
        raise ValueError("ensemble needs at least one member")
    rng = seed if isinstance(seed, Rng) else seeded_rng(seed)
    if member_seeds is None:
        member_seeds = [rng.child("member", k) for k in range(size)]
    elif len(member_seeds) != size:
        raise ValueError("member_seeds must have one entry per member")
    return [
        train_dnn(spec, data, epochs=epochs, lr=lr, batch_size=batch_size, seed=s)
        for s in member_seeds
    ]


def svgd_update(weights: np.ndarray, logp_grads: np.ndarray, bw: Bandwidth) -> np.ndarray:
    """Stein variational ascent directions for a particle stack.

    phi(w_i) = (1/m) sum_l [ kappa(w_l, w_i) grad_{w_l} log p(w_l | D)
                             + grad_{w_l} kappa(w_l, w_i) ]

    The second (repulsive) term, (2/h) sum_l kappa_{li} (w_i - w_l),
    keeps particles from collapsing; it vanishes when particles coincide.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    logp_grads = np.atleast_2d(np.asarray(logp_grads, dtype=np.float64))
    if weights.shape != logp_grads.shape:
        raise ValueError("weights and gradients must align")
    m = weights.shape[0]
    kappa = param_rbf_matrix(weights, bw)
    drive = kappa @ logp_grads
    ksum = kappa.sum(axis=1)
    repulse = (2.0 / bw.h) * (ksum[:, None] * weights - kappa @ weights)
    return (drive + repulse) / m


def train_bnn(
    spec: MlpSpec,
    data: LabeledDataset,
    *,
    particles: int = 20,
    prior_std: float = 1.0,
    epochs: int = 100,
    lr: float = 1e-3,
    batch_size: int = 20,
    seed: int | Rng = 0,
) -> BnnEnsemble:
    """Stein variational training of a weight-particle posterior.

    Log posterior: -(cross-entropy summed over the data)
    - ||w||^2 / (2 prior_std^2), up to a constant. Minibatches estimate
    the likelihood term with an n/batch rescaling; the ascent direction
    is handed to the optimizer scaled per-datum (divided by n) so that a
    single particle under a flat prior follows the plain classifier's
    trajectory.
    """
    _check_classifier_spec(spec, data)
    if data.n < 1:
        raise ValueError("training needs at least one point")
    if particles < 1:
        raise ValueError("need at least one particle")
    rng = seed if isinstance(seed, Rng) else seeded_rng(seed)
    weights = np.stack(
        [init_params(spec, rng.child("init", i)) for i in range(particles)]
    )
    state = NadamState.zeros_like(weights)
    targets = onehot(data.y, data.n_classes)
    prior_var = float(prior_std) ** 2
    last_finite = weights
    for batches in _batches(data.n, batch_size, rng.child("shuffle"), epochs):
        for idx in batches:
            scale = data.n / len(idx)
            logp_grads = np.empty_like(weights)
            for l in range(particles):
                logits, cache = forward(spec, weights[l], data.X[idx])
                upstream = softmax(logits) - targets[idx]
                ce_grad, _ = vjp(spec, weights[l], cache, upstream)
                logp_grads[l] = -scale * ce_grad - weights[l] / prior_var
            if not np.all(np.isfinite(logp_grads)):
                raise NumericError(
                    "non-finite gradient",
                    checkpoint=BnnEnsemble(spec, last_finite, prior_std),
                )
            last_finite = weights
            phi = svgd_update(weights, logp_grads, median_bandwidth(weights))
            weights, state = nadam_step(state, weights, -phi / data.n, lr)
    if not np.all(np.isfinite(weights)):
        raise NumericError(
            "non-finite weights after final step",
            checkpoint=BnnEnsemble(spec, last_finite, prior_std),
        )
    return BnnEnsemble(spec=spec, weights=weights, prior_std=prior_std)


def mean_softmax_predict(member_probs) -> tuple:
    """Average member probability rows and decide.

    ``member_probs`` is an iterable of (n, C) arrays. Returns
    ``(labels, confidences, mean_probs)``; argmax ties resolve to the
    smallest class index.
    """
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in member_probs])
    if stack.shape[0] < 1:
        raise ValueError("need at least one member")
    mean = stack.mean(axis=0)
    labels = mean.argmax(axis=1)
    conf = mean.max(axis=1)
    return labels, conf, mean


def predict_softmax(models, x_test: np.ndarray):
    """Predict with one classifier, a member list, or a particle posterior.

    Softmax rows are averaged across members/particles; the label is the
    argmax of the mean (ties to the smallest index) and the confidence is
    its probability.
    """
    if isinstance(models, SoftmaxClassifier):
        members = [(models.spec, models.params)]
    elif isinstance(models, BnnEnsemble):
        members = [(models.spec, w) for w in models.weights]
    else:
        members = [(mdl.spec, mdl.params) for mdl in models]
    if not members:
        raise ValueError("no members to predict with")
    probs = (softmax(forward(spec, params, x_test)[0]) for spec, params in members)
    return mean_softmax_predict(probs)
