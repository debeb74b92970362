"""Kernels on embeddings and on parameter vectors.

Two kernels coexist and must not be confused:

* the latent-space kernel ``k(z, z') = exp(-||z - z'||^2)``, a fixed
  squared-exponential with no free bandwidth (any rescaling is the
  embedding network's job), approximated where needed by orthogonal
  random features;
* the parameter-space RBF ``exp(-||w - w'||^2 / h)`` whose squared
  lengthscale ``h`` comes from the median heuristic over the current
  particles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng, gaussian_sample, random_orthogonal

__all__ = [
    "sqexp",
    "sqexp_grad",
    "pairwise_sq_dists",
    "Bandwidth",
    "param_rbf",
    "param_rbf_matrix",
    "median_bandwidth",
    "OrfProjection",
    "orf_build",
    "orf_map",
    "clamp_nonneg",
]


def sqexp(z: np.ndarray, zp: np.ndarray) -> float:
    """Squared-exponential kernel exp(-||z - z'||^2) between two vectors."""
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(zp, dtype=np.float64)
    if z.shape != zp.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {zp.shape}")
    d = z - zp
    return float(np.exp(-np.dot(d, d)))


def sqexp_grad(z: np.ndarray, zp: np.ndarray):
    """Gradients of :func:`sqexp` in both arguments.

    dk/dz = -2 (z - z') k(z, z'); the second gradient is its negation.
    """
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(zp, dtype=np.float64)
    d = z - zp
    k = np.exp(-np.dot(d, d))
    gz = -2.0 * d * k
    return gz, -gz


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """All squared Euclidean distances between rows of ``a`` and ``b``.

    Uses the expansion ||a - b||^2 = ||a||^2 + ||b||^2 - 2 a.b, clipped at
    zero. When ``b`` is omitted the result is exactly symmetric with a
    zero diagonal.
    """
    a = np.asarray(a, dtype=np.float64)
    self_pair = b is None
    b = a if self_pair else np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")
    sq_a = np.einsum("ij,ij->i", a, a)
    sq_b = sq_a if self_pair else np.einsum("ij,ij->i", b, b)
    d = sq_a[:, None] + sq_b[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    if self_pair:
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class Bandwidth:
    """Squared lengthscale of the parameter-space RBF."""

    h: float

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"bandwidth must be positive and finite, got {self.h}")


def param_rbf(w: np.ndarray, wp: np.ndarray, bw: Bandwidth) -> float:
    """RBF kernel exp(-||w - w'||^2 / h) between parameter vectors."""
    w = np.asarray(w, dtype=np.float64)
    wp = np.asarray(wp, dtype=np.float64)
    if w.shape != wp.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {wp.shape}")
    d = w - wp
    return float(np.exp(-np.dot(d, d) / bw.h))


def param_rbf_matrix(weights: np.ndarray, bw: Bandwidth) -> np.ndarray:
    """Kernel matrix of :func:`param_rbf` over stacked particles (m, p)."""
    d = pairwise_sq_dists(np.atleast_2d(weights))
    return np.exp(-d / bw.h)


def median_bandwidth(weights: np.ndarray) -> Bandwidth:
    """Median-heuristic bandwidth for a stack of particles (m, p).

    h = med^2 / log(m + 1) where med is the median pairwise Euclidean
    distance. With this choice the kernel row sums are approximately one,
    so the kernel acts like a probability distribution over particles.
    Falls back to h = 1 when there are no pairs (m = 1) or all particles
    coincide.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    m = weights.shape[0]
    if m < 2:
        return Bandwidth(1.0)
    d = pairwise_sq_dists(weights)
    med = float(np.median(np.sqrt(d[np.triu_indices(m, k=1)])))
    if med == 0.0:
        return Bandwidth(1.0)
    return Bandwidth(med**2 / math.log(m + 1))


@dataclass(frozen=True)
class OrfProjection:
    """Frequencies for a random-feature map of the latent kernel.

    ``projection`` has shape (num_features / 2, d): each row is a
    frequency; the feature map pairs a cosine and a sine per row. Rows
    are built from ``scale`` times chi-scaled random orthogonal blocks,
    so row marginals match Normal(0, scale^2 I) while directions within
    a block stay orthogonal, which lowers the approximation variance.
    ``scale = sqrt(2)`` targets k(z, z') = exp(-||z - z'||^2).
    """

    projection: np.ndarray
    num_features: int
    scale: float = math.sqrt(2.0)

    @property
    def dim(self) -> int:
        return self.projection.shape[1]


def orf_build(d: int, rng: Rng, num_features: int | None = None) -> OrfProjection:
    """Build an orthogonal random-feature projection for dimension ``d``.

    ``num_features`` defaults to 10 d. Each block of up to ``d`` rows is
    S Q with Q a random orthogonal matrix and S a diagonal of
    chi(d)-distributed norms (row norms of a fresh Gaussian matrix),
    then scaled by sqrt(2).
    """
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if num_features is None:
        num_features = 10 * d  # always even
    if num_features < 2 or num_features % 2:
        raise ValueError(f"num_features must be even and >= 2, got {num_features}")
    n_rows = num_features // 2
    scale = math.sqrt(2.0)
    blocks = []
    rows_left = n_rows
    while rows_left > 0:
        q = random_orthogonal(rng, d)
        norms = np.linalg.norm(gaussian_sample(rng, d, d), axis=1)
        blocks.append(scale * norms[:, None] * q)
        rows_left -= d
    projection = np.vstack(blocks)[:n_rows]
    return OrfProjection(projection=projection, num_features=num_features, scale=scale)


def orf_map(proj: OrfProjection, z: np.ndarray) -> np.ndarray:
    """Feature rows phi(z) with phi(z).phi(z') ~= exp(-||z - z'||^2).

    Output is (n, num_features): cosines then sines of the projected
    coordinates, scaled by sqrt(2 / num_features) so each row has unit
    norm.
    """
    phi, _ = _orf_map_cached(proj, z)
    return phi


def _orf_map_cached(proj: OrfProjection, z: np.ndarray):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != proj.dim:
        raise ValueError(f"z has shape {z.shape}, projection expects (n, {proj.dim})")
    angles = z @ proj.projection.T
    root = math.sqrt(2.0 / proj.num_features)
    cos, sin = np.cos(angles), np.sin(angles)
    phi = root * np.concatenate([cos, sin], axis=1)
    return phi, (cos, sin, root)


def _orf_map_vjp(proj: OrfProjection, cache, upstream: np.ndarray) -> np.ndarray:
    """Pull an upstream gradient on phi(z) back to z (cos/sin chain rule)."""
    cos, sin, root = cache
    half = proj.projection.shape[0]
    u_cos = upstream[:, :half]
    u_sin = upstream[:, half:]
    d_angles = root * (cos * u_sin - sin * u_cos)
    return d_angles @ proj.projection


def clamp_nonneg(k: np.ndarray) -> np.ndarray:
    """Zero out spurious negative entries of an approximate kernel matrix."""
    return np.maximum(np.asarray(k, dtype=np.float64), 0.0)
