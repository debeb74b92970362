"""Neighbourhood component analysis over weight distributions.

Instead of a single embedding network, a point is mapped through ``m``
sampled weight vectors (particles), so it lands on an empirical
*distribution* in latent space. Similarity between two points is the
mean latent kernel over all particle pairs, which is the inner product
of their kernel mean embeddings; selection probabilities, loss and
prediction then mirror the deterministic model with this distribution
kernel in place of ``exp(-||z_i - z_j||^2)``.

Training moves all particles jointly: each step computes the per-particle
loss gradients, then smooths them with a parameter-space RBF (median
heuristic bandwidth) into per-particle update directions

    phi(w_i) = sum_l kappa(w_i, w_l) * grad_{w_l} loss,

which is the functional gradient of the loss with respect to a shift of
the weight distribution, evaluated at zero shift and estimated from the
particles. With one particle everything collapses exactly to the
deterministic model: kappa(w, w) = 1, the mean kernel is the plain
kernel, and the update is the ordinary gradient step.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError
from .kernels import (
    Bandwidth,
    OrfProjection,
    _orf_map_cached,
    _orf_map_vjp,
    clamp_nonneg,
    median_bandwidth,
    orf_build,
    orf_map,
    pairwise_sq_dists,
    param_rbf_matrix,
)
from .mlp import (
    PARAMS_MAGIC,
    MlpSpec,
    NadamState,
    _parse_params,
    forward,
    init_params,
    nadam_step,
    save_params,
    vjp,
)
from .nca import (
    LOSS_FLOOR,
    LabeledDataset,
    _cross_probs,
    _embedding_grad,
    _selection_nll_grad,
    class_posterior,
    nca_loss,
)
from .rng import Rng, seeded_rng

__all__ = [
    "ParticleEnsemble",
    "EmpiricalKernelMatrix",
    "embed_ensemble",
    "empirical_kernel",
    "pnca_probs",
    "pnca_loss",
    "particle_grads",
    "functional_gradient",
    "resolve_kernel_path",
    "train_pnca",
    "predict_pnca",
    "save_ensemble",
    "load_ensemble",
]

ENSEMBLE_MAGIC = b"PNCA-E1"

logger = logging.getLogger(__name__)

# Above this many embeddings per pass (points x particles) the exact
# m^2 kernel is replaced by random features unless a path is forced.
_ORF_AUTO_THRESHOLD = 1000


@dataclass
class ParticleEnsemble:
    """Stack of ``m`` flat weight vectors sampled from the weight law."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise ValueError("weights must be a non-empty (m, n_params) array")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights contain non-finite entries")

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def __len__(self) -> int:
        return self.m

    def __getitem__(self, l: int) -> np.ndarray:
        return self.weights[l]

    @classmethod
    def from_particles(cls, particles) -> "ParticleEnsemble":
        return cls(np.stack([np.asarray(p, dtype=np.float64) for p in particles]))


@dataclass
class EmpiricalKernelMatrix:
    """Distribution kernel estimated from particles; ``path`` records how."""

    K: np.ndarray
    path: str


def _as_ensemble(ensemble) -> ParticleEnsemble:
    if isinstance(ensemble, ParticleEnsemble):
        return ensemble
    return ParticleEnsemble(np.atleast_2d(np.asarray(ensemble, dtype=np.float64)))


def embed_ensemble(spec: MlpSpec, ensemble, x: np.ndarray):
    """Embed a batch under every particle.

    Returns ``(e, caches)`` with ``e`` of shape (n, m, d): slice
    ``e[:, l, :]`` is the forward pass under particle ``l``, and
    ``caches[l]`` its backprop cache.
    """
    ensemble = _as_ensemble(ensemble)
    outs, caches = [], []
    for l in range(ensemble.m):
        z, cache = forward(spec, ensemble.weights[l], x)
        outs.append(z)
        caches.append(cache)
    return np.stack(outs, axis=1), caches


def resolve_kernel_path(n: int, m: int, path: str = "auto") -> str:
    """Pick the kernel evaluation strategy.

    ``auto`` uses random features once ``n * m`` reaches 1000 (the exact
    kernel costs O(n^2 m^2 d)); below that the exact kernel is cheap.
    """
    if path not in ("auto", "exact", "orf"):
        raise ValueError(f"unknown kernel path {path!r}")
    if path == "auto":
        return "orf" if n * m >= _ORF_AUTO_THRESHOLD else "exact"
    return path


def empirical_kernel(
    embeddings: np.ndarray, path: str = "exact", proj: OrfProjection | None = None
) -> EmpiricalKernelMatrix:
    """Kernel matrix between the latent distributions of each point.

    Exact path: ``K[i, j]`` is the mean of ``exp(-||z_i^l - z_j^l'||^2)``
    over all ``m^2`` particle pairs — the Gram matrix of the empirical
    kernel mean embeddings, hence symmetric and positive semidefinite.

    Random-feature path: each point is summarised by the mean feature
    vector of its particle embeddings and ``K`` is the clamped Gram of
    those means, computable in O(n m F + n^2 F).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 3:
        raise ValueError(f"embeddings must be (n, m, d), got shape {e.shape}")
    n, m, d = e.shape
    if path == "exact":
        g = np.exp(-pairwise_sq_dists(e.reshape(n * m, d)))
        k = g.reshape(n, m, n, m).sum(axis=(1, 3)) / (m * m)
        k = 0.5 * (k + k.T)
        return EmpiricalKernelMatrix(K=k, path="exact")
    if path == "orf":
        if proj is None or proj.dim != d:
            raise ValueError("orf path needs a projection matching the latent dim")
        phi, _ = _orf_map_cached(proj, e.reshape(n * m, d))
        phi_mean = phi.reshape(n, m, proj.num_features).mean(axis=1)
        k = clamp_nonneg(phi_mean @ phi_mean.T)
        k = 0.5 * (k + k.T)
        return EmpiricalKernelMatrix(K=k, path="orf")
    raise ValueError(f"unknown kernel path {path!r}")


def pnca_probs(kernel) -> np.ndarray:
    """Selection probabilities from a distribution kernel matrix.

    ``q[i, j] = K[i, j] / sum_{j' != i} K[i, j']`` with a zero diagonal.
    A row whose off-diagonal mass is exactly zero (possible on the
    clamped random-feature path) falls back to the uniform distribution
    over the other points, keeping the loss finite; fallbacks are noted
    on this module's logger.
    """
    k = kernel.K if isinstance(kernel, EmpiricalKernelMatrix) else kernel
    k = np.asarray(k, dtype=np.float64)
    n = k.shape[0]
    if k.ndim != 2 or k.shape != (n, n) or n < 2:
        raise ValueError("kernel must be square with at least two points")
    off = k.copy()
    np.fill_diagonal(off, 0.0)
    r = off.sum(axis=1)
    dead = r == 0.0
    if dead.any():
        logger.debug("%d kernel row(s) had no mass; using uniform fallback", dead.sum())
        off[dead] = 1.0
        off[dead, np.arange(n)[dead]] = 0.0
        r = off.sum(axis=1)
    return off / r[:, None]


# Identical contract to the deterministic loss, applied to this model's
# selection matrix.
pnca_loss = nca_loss


def _orf_loss_grads(spec, ensemble, data, proj):
    n, m = data.n, ensemble.m
    e, caches = embed_ensemble(spec, ensemble, data.X)
    phis, orf_caches = [], []
    for l in range(m):
        phi_l, cache_l = _orf_map_cached(proj, e[:, l, :])
        phis.append(phi_l)
        orf_caches.append(cache_l)
    phi_mean = sum(phis) / m
    pre = phi_mean @ phi_mean.T
    k = clamp_nonneg(pre)
    np.fill_diagonal(k, 0.0)
    r = k.sum(axis=1)

    same = data.y[:, None] == data.y[None, :]
    np.fill_diagonal(same, False)
    dead = r == 0.0
    if dead.any():
        logger.debug(
            "%d kernel row(s) had no mass; using uniform fallback", dead.sum()
        )
    r_safe = np.where(dead, 1.0, r)
    q = np.where(dead[:, None], 1.0 / (n - 1), k / r_safe[:, None])
    if dead.any():
        q[dead, np.arange(n)[dead]] = 0.0
    qi = np.where(same, q, 0.0).sum(axis=1)
    loss = float(-np.log(np.maximum(qi, LOSS_FLOOR)).sum())

    # Rows that were floored or fell back to uniform carry no gradient.
    active = (qi > LOSS_FLOOR) & ~dead
    qi_safe = np.where(active, qi, 1.0)
    c = (1.0 - same / qi_safe[:, None]) / r_safe[:, None]
    c[~active] = 0.0
    np.fill_diagonal(c, 0.0)
    # Clamped entries have zero subgradient; the feature map itself is
    # differentiated analytically.
    t = (c + c.T) * (pre > 0.0)
    np.fill_diagonal(t, 0.0)
    d_phi_mean = t @ phi_mean

    grads = np.empty_like(ensemble.weights)
    for l in range(m):
        dz = _orf_map_vjp(proj, orf_caches[l], d_phi_mean / m)
        grads[l], _ = vjp(spec, ensemble.weights[l], caches[l], dz)
    return loss, grads


def particle_grads(
    spec: MlpSpec,
    ensemble,
    data: LabeledDataset,
    path: str = "exact",
    proj: OrfProjection | None = None,
):
    """Loss and per-particle gradients on a full batch.

    Returns ``(loss, grads)`` with ``grads[l]`` the gradient of the loss
    with respect to particle ``l``. A particle enters the mean kernel in
    both pairing positions, and both contributions are included.
    """
    ensemble = _as_ensemble(ensemble)
    if data.n < 2:
        raise ValueError("need at least two points")
    if path == "orf":
        if proj is None or proj.dim != spec.n_outputs:
            raise ValueError("orf path needs a projection matching the latent dim")
        return _orf_loss_grads(spec, ensemble, data, proj)
    if path != "exact":
        raise ValueError(f"unknown kernel path {path!r}")

    n, m = data.n, ensemble.m
    e, caches = embed_ensemble(spec, ensemble, data.X)
    flat = e.reshape(n * m, spec.n_outputs)
    d = pairwise_sq_dists(flat)
    loss, _, _, coeff = _selection_nll_grad(d, n, m, data.y)
    d_flat = _embedding_grad(coeff, flat)
    d_e = d_flat.reshape(n, m, spec.n_outputs)
    grads = np.empty_like(ensemble.weights)
    for l in range(m):
        grads[l], _ = vjp(spec, ensemble.weights[l], caches[l], d_e[:, l, :])
    return loss, grads


def functional_gradient(ensemble, grads: np.ndarray, bw: Bandwidth) -> np.ndarray:
    """Kernel-smoothed update directions, one row per particle.

    ``phi(w_i) = sum_l kappa(w_i, w_l) grads[l]`` — the empirical
    functional gradient of the loss with respect to a shift of the
    weight distribution, evaluated at the particles.
    """
    ensemble = _as_ensemble(ensemble)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != ensemble.weights.shape:
        raise ValueError("grads must align with the ensemble, one row per particle")
    kappa = param_rbf_matrix(ensemble.weights, bw)
    return kappa @ grads


def train_pnca(
    spec: MlpSpec,
    data: LabeledDataset,
    *,
    particles: int = 20,
    epochs: int = 100,
    lr: float = 1e-3,
    seed: int | Rng = 0,
    path: str = "auto",
    orf_features: int | None = None,
    plain_step: bool = False,
):
    """Train a particle ensemble; returns ``(ensemble, loss_history)``.

    Particles start as independent draws of the standard initialiser
    (the tractable Gaussian initial weight law). Every epoch uses the
    whole dataset: per-particle gradients, a fresh median-heuristic
    bandwidth, kernel smoothing into update directions, then one
    optimizer step per particle. ``plain_step`` replaces the
    Nesterov-Adam update with a bare ``w -= lr * phi(w)`` step.
    """
    if data.n < 2:
        raise ValueError("training needs at least two points")
    if particles < 1:
        raise ValueError("need at least one particle")
    rng = seed if isinstance(seed, Rng) else seeded_rng(seed)
    use_path = resolve_kernel_path(data.n, particles, path)
    proj = None
    if use_path == "orf":
        proj = orf_build(spec.n_outputs, rng.child("orf"), orf_features)
    weights = np.stack(
        [init_params(spec, rng.child("init", i)) for i in range(particles)]
    )
    ensemble = ParticleEnsemble(weights)
    state = NadamState.zeros_like(weights)
    history = np.empty(epochs)
    last_finite = ensemble
    for epoch in range(epochs):
        loss, grads = particle_grads(spec, ensemble, data, use_path, proj)
        if not (np.isfinite(loss) and np.all(np.isfinite(grads))):
            raise NumericError(
                f"non-finite loss/gradient at epoch {epoch}", checkpoint=last_finite
            )
        last_finite = ensemble
        history[epoch] = loss
        bw = median_bandwidth(weights)
        phi = functional_gradient(ensemble, grads, bw)
        if plain_step:
            weights = weights - lr * phi
        else:
            weights, state = nadam_step(state, weights, phi, lr)
        if not np.all(np.isfinite(weights)):
            raise NumericError(
                f"non-finite weights after epoch {epoch}", checkpoint=last_finite
            )
        ensemble = ParticleEnsemble(weights)
    return ensemble, history


def predict_pnca(
    spec: MlpSpec,
    ensemble,
    train: LabeledDataset,
    x_test: np.ndarray,
    path: str = "auto",
    orf_features: int | None = None,
    seed: int = 0,
    chunk: int = 512,
):
    """Classify test points with the distribution kernel.

    Each test point's particle embeddings are compared against every
    training point's (same kernel as training), the row is normalised
    over training points, and class mass is summed per label. Returns
    ``(labels, confidences, class_probs)``; ties go to the smallest
    class index.
    """
    ensemble = _as_ensemble(ensemble)
    if train.n == 0:
        raise ValueError("empty training set")
    x_test = np.asarray(x_test, dtype=np.float64)
    n, m = train.n, ensemble.m
    use_path = resolve_kernel_path(n, m, path)
    e_train, _ = embed_ensemble(spec, ensemble, train.X)
    e_test, _ = embed_ensemble(spec, ensemble, x_test)
    t = x_test.shape[0]
    d_out = spec.n_outputs

    if use_path == "orf":
        proj = orf_build(d_out, seeded_rng(seed).child("predict-orf"), orf_features)
        phi_train = (
            orf_map(proj, e_train.reshape(n * m, d_out))
            .reshape(n, m, proj.num_features)
            .mean(axis=1)
        )
        phi_test = (
            orf_map(proj, e_test.reshape(t * m, d_out))
            .reshape(t, m, proj.num_features)
            .mean(axis=1)
        )
        k = clamp_nonneg(phi_test @ phi_train.T)
        r = k.sum(axis=1)
        dead = r == 0.0
        if dead.any():
            logger.debug(
                "%d test row(s) had no kernel mass; using uniform fallback",
                dead.sum(),
            )
            k[dead] = 1.0
            r = k.sum(axis=1)
        q = k / r[:, None]
    else:
        train_flat = e_train.reshape(n * m, d_out)
        rows = []
        for start in range(0, t, chunk):
            stop = min(start + chunk, t)
            test_flat = e_test[start:stop].reshape((stop - start) * m, d_out)
            d = pairwise_sq_dists(test_flat, train_flat)
            rows.append(_cross_probs(d, n, m))
        q = np.vstack(rows)

    probs = class_posterior(q, train.y, train.n_classes)
    labels = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    return labels, conf, probs


def save_ensemble(path, spec: MlpSpec, ensemble) -> None:
    """Write an ensemble: magic, particle count, then one block per
    particle in the single-vector format."""
    ensemble = _as_ensemble(ensemble)
    if ensemble.weights.shape[1] != spec.param_count():
        raise ValueError("ensemble does not match spec")
    with open(path, "wb") as fh:
        fh.write(ENSEMBLE_MAGIC)
        fh.write(struct.pack("<I", ensemble.m))
        for l in range(ensemble.m):
            fh.write(PARAMS_MAGIC)
            fh.write(struct.pack("<I", len(spec.layer_dims)))
            fh.write(struct.pack(f"<{len(spec.layer_dims)}I", *spec.layer_dims))
            fh.write(np.ascontiguousarray(ensemble.weights[l], dtype="<f8").tobytes())


def load_ensemble(path, hidden_activation="relu", output_activation="identity"):
    """Read an ensemble written by :func:`save_ensemble`.

    Returns ``(spec, ensemble)``.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(ENSEMBLE_MAGIC)] != ENSEMBLE_MAGIC:
        raise FormatError(
            f"bad magic {blob[:len(ENSEMBLE_MAGIC)]!r}, expected {ENSEMBLE_MAGIC!r}"
        )
    offset = len(ENSEMBLE_MAGIC)
    if len(blob) < offset + 4:
        raise FormatError("truncated particle count")
    (m,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if m < 1:
        raise FormatError("ensemble must hold at least one particle")
    spec = None
    particles = []
    for _ in range(m):
        block_spec, params, offset = _parse_params(
            blob, hidden_activation, output_activation, offset
        )
        if spec is None:
            spec = block_spec
        elif block_spec != spec:
            raise FormatError("particles disagree on the architecture")
        particles.append(params)
    return spec, ParticleEnsemble.from_particles(particles)
