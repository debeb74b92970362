"""Minimal fully-connected network with hand-written reverse mode.

Parameters live in a single flat float64 vector (layer order: weight
matrix in C order, then bias); all models in the package share this
representation so particle ensembles are plain 2-D arrays. The optimizer
is Adam with Nesterov momentum, written as a pure function so training
loops can carry (params, state) pairs explicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, NumericError
from .rng import Rng, gaussian_sample

__all__ = [
    "MlpSpec",
    "NadamState",
    "init_params",
    "forward",
    "vjp",
    "nadam_step",
    "save_params",
    "load_params",
]

_ACTIVATIONS = ("relu", "identity")
PARAMS_MAGIC = b"PNCA-W1"


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected network.

    ``layer_dims`` is ``[n_inputs, hidden..., n_outputs]``. Hidden layers
    use ``hidden_activation``; the final layer uses ``output_activation``
    (identity for embeddings — classifiers apply softmax downstream).
    """

    layer_dims: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least input and output sizes")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be positive, got {dims}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown hidden_activation {self.hidden_activation!r}")
        if self.output_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown output_activation {self.output_activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def param_count(self) -> int:
        dims = self.layer_dims
        return sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))


def init_params(spec: MlpSpec, rng: Rng) -> np.ndarray:
    """Draw initial parameters: weights ~ Normal(0, 1/fan_in), biases 0."""
    chunks = []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = gaussian_sample(rng, fan_in, fan_out, std=fan_in ** -0.5)
        chunks.append(w.ravel())
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _layers(spec: MlpSpec, params: np.ndarray):
    """Views (no copies) of the per-layer (W, b) blocks of a flat vector."""
    if params.shape != (spec.param_count(),):
        raise ValueError(
            f"params has shape {params.shape}, spec needs ({spec.param_count()},)"
        )
    out = []
    offset = 0
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        out.append((w, b))
    return out


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Run the network on a batch.

    ``x`` is ``(n, n_inputs)``. Returns ``(z, cache)`` where ``z`` is the
    ``(n, n_outputs)`` batch of outputs and ``cache`` holds the per-layer
    inputs and pre-activations needed by :func:`vjp`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise ValueError(
            f"input has shape {x.shape}, spec expects (n, {spec.n_inputs})"
        )
    inputs = []
    pres = []
    h = x
    for i, (w, b) in enumerate(_layers(spec, params)):
        inputs.append(h)
        pre = h @ w + b
        pres.append(pre)
        last = i == spec.n_layers - 1
        act = spec.output_activation if last else spec.hidden_activation
        h = np.maximum(pre, 0.0) if act == "relu" else pre
    return h, (x.shape, inputs, pres)


def vjp(spec: MlpSpec, params: np.ndarray, cache, upstream: np.ndarray):
    """Vector-Jacobian product of a forward pass.

    Given ``upstream = dL/dz`` for the cached batch, returns
    ``(param_grad, input_grad)`` with ``param_grad`` flat like ``params``.
    """
    x_shape, inputs, pres = cache
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x_shape[0], spec.n_outputs):
        raise ValueError(
            f"upstream has shape {upstream.shape}, cache expects "
            f"({x_shape[0]}, {spec.n_outputs})"
        )
    if len(inputs) != spec.n_layers:
        raise ValueError("cache does not match spec")
    layers = _layers(spec, params)
    grads = [None] * spec.n_layers
    delta = upstream
    for i in range(spec.n_layers - 1, -1, -1):
        last = i == spec.n_layers - 1
        act = spec.output_activation if last else spec.hidden_activation
        if act == "relu":
            delta = np.where(pres[i] > 0.0, delta, 0.0)
        dw = inputs[i].T @ delta
        db = delta.sum(axis=0)
        grads[i] = (dw, db)
        delta = delta @ layers[i][0].T
    flat = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
    return flat, delta


@dataclass(frozen=True)
class NadamState:
    """Moment estimates for the Nesterov-accelerated Adam update."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kwargs) -> "NadamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), **kwargs)


def nadam_step(state: NadamState, params: np.ndarray, grad: np.ndarray, lr: float):
    """One Nesterov-Adam update; returns ``(new_params, new_state)``.

    With t the incremented step counter, the update is

        m <- b1 m + (1 - b1) g           v <- b2 v + (1 - b2) g^2
        m_bar = b1 m / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t)
        params <- params - lr * m_bar / (sqrt(v / (1 - b2^t)) + eps)

    i.e. the bias-corrected momentum look-ahead with a constant momentum
    schedule. Shapes are free as long as params/grad/moments agree, so a
    whole particle ensemble can be updated with one stacked state.
    """
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, grad, and state shapes must agree")
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient entries")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_bar = b1 * m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * grad / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new_params = params - lr * m_bar / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def save_params(path, spec: MlpSpec, params: np.ndarray) -> None:
    """Write a parameter vector.

    Layout: magic ``PNCA-W1``, then little-endian uint32 layer count and
    layer dims, then the float64 values (little-endian). Activations are
    not stored; loaders supply them.
    """
    if params.shape != (spec.param_count(),):
        raise ValueError("params does not match spec")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(spec.layer_dims)))
        fh.write(struct.pack(f"<{len(spec.layer_dims)}I", *spec.layer_dims))
        fh.write(np.ascontiguousarray(params, dtype="<f8").tobytes())


def load_params(path, hidden_activation="relu", output_activation="identity"):
    """Read a parameter vector written by :func:`save_params`.

    Returns ``(spec, params)``.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    spec, params, _ = _parse_params(blob, hidden_activation, output_activation)
    return spec, params


def _parse_params(blob, hidden_activation, output_activation, offset=0):
    end = offset + len(PARAMS_MAGIC)
    if blob[offset:end] != PARAMS_MAGIC:
        raise FormatError(f"bad magic {blob[offset:end]!r}, expected {PARAMS_MAGIC!r}")
    if len(blob) < end + 4:
        raise FormatError("truncated header")
    (n_dims,) = struct.unpack_from("<I", blob, end)
    end += 4
    if len(blob) < end + 4 * n_dims:
        raise FormatError("truncated dim list")
    dims = struct.unpack_from(f"<{n_dims}I", blob, end)
    end += 4 * n_dims
    spec = MlpSpec(dims, hidden_activation, output_activation)
    n_bytes = 8 * spec.param_count()
    if len(blob) < end + n_bytes:
        raise FormatError(
            f"expected {spec.param_count()} float64 values, file is short"
        )
    params = np.frombuffer(blob[end : end + n_bytes], dtype="<f8").astype(np.float64)
    return spec, params, end + n_bytes
