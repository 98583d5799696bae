"""Feedforward binary classifier written directly in numpy.

Hidden layers are affine maps followed by an activation; the output is a
single logit squashed by a sigmoid and trained with the logistic loss.
Gradients are derived by hand and the optimizer is Adam. Inputs may be
dense arrays, :class:`SparseVector` or CSR matrices; the first layer only
touches stored entries of sparse inputs.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .features import SparseVector

log = logging.getLogger(__name__)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
ACTIVATIONS = ("selu", "relu", "tanh")

FULL_SCALE_HIDDEN_DIMS = (512,) * 18
DESK_HIDDEN_DIMS = (64,) * 4

_P_MIN = np.finfo(np.float64).tiny
_P_MAX = np.nextafter(1.0, 0.0)


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None, iteration: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


def activation(x, kind: str):
    x = np.asarray(x, dtype=np.float64)
    if kind == "selu":
        # expm1 on the clipped branch only, to avoid overflow warnings for large x
        return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(x, kind: str):
    """Derivative of :func:`activation` with respect to its pre-activation input."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "selu":
        return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(x) ** 2
    raise ValueError(f"unknown activation {kind!r}")


def selu(x):
    return activation(x, "selu")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = DESK_HIDDEN_DIMS
    activation: str = "selu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims or any(h <= 0 for h in self.hidden_dims):
            raise ValueError("need at least one hidden layer, all widths positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class MLPParams:
    """Layer weights (out x in) and biases; the last layer has one output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "selu"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation)

    def zeros_like(self) -> "MLPParams":
        return MLPParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.activation)

    def equals(self, other: "MLPParams") -> bool:
        return self.activation == other.activation and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.arrays(), other.arrays()))


def init_params(config: ModelConfig) -> MLPParams:
    """Normal(0, 1/fan_in) weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    dims = (config.input_dim,) + config.hidden_dims + (1,)
    weights = [rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
               for n_in, n_out in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(n_out) for n_out in dims[1:]]
    return MLPParams(weights, biases, config.activation)


def _as_batch(X, input_dim: int):
    if isinstance(X, SparseVector):
        if X.dim != input_dim:
            raise ValueError(f"input has dimension {X.dim}, model expects {input_dim}")
        return sp.csr_matrix((X.values, X.indices, [0, X.nnz]), shape=(1, X.dim))
    if sp.issparse(X):
        X = X.tocsr()
    else:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != input_dim:
        raise ValueError(f"input has dimension {X.shape[1]}, model expects {input_dim}")
    return X


def _first_layer(X, W, b):
    # sparse @ dense costs nnz(X) * width
    return np.asarray(X @ W.T) + b


def _forward(params: MLPParams, X, keep: bool = False):
    X = _as_batch(X, params.input_dim)
    pre, post = [], [X]
    h = X
    n_layers = len(params.weights)
    # overflow surfaces as inf/nan, which the loss checks layer by layer
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (W, b) in enumerate(zip(params.weights, params.biases)):
            z = _first_layer(h, W, b) if i == 0 else h @ W.T + b
            if i == n_layers - 1:
                logits = z[:, 0]
                break
            h = activation(z, params.activation)
            if keep:
                pre.append(z)
                post.append(h)
    return logits, pre, post


def predict_logit(params: MLPParams, X) -> np.ndarray:
    return _forward(params, X)[0]


def forward(params: MLPParams, X):
    """Predicted probability in the open interval (0, 1).

    Returns a float for a single :class:`SparseVector` or 1-D input, else an array.
    """
    p = np.clip(expit(predict_logit(params, X)), _P_MIN, _P_MAX)
    single = isinstance(X, SparseVector) or (not sp.issparse(X) and np.ndim(X) == 1)
    return float(p[0]) if single else p


def logistic_loss(logits, y) -> np.ndarray:
    """Per-example ``-[y log p + (1-y) log(1-p)]`` computed from logits."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.logaddexp(0.0, logits) - np.asarray(y, dtype=np.float64) * logits


def loss_and_gradients(params: MLPParams, X, y) -> tuple[float, MLPParams]:
    """Mean logistic loss over the batch and its gradient for every parameter."""
    y = np.asarray(y, dtype=np.float64).ravel()
    logits, pre, post = _forward(params, X, keep=True)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if n != y.shape[0]:
        raise ValueError("batch and label counts differ")
    for i, z in enumerate(pre):
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite pre-activation in layer {i}", layer=i)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite output logit", layer=len(pre))
    loss = float(np.mean(logistic_loss(logits, y)))

    grads = params.zeros_like()
    delta = ((expit(logits) - y) / n)[:, None]  # d loss / d logits
    for i in range(len(params.weights) - 1, -1, -1):
        a = post[i]
        if i == 0 and sp.issparse(a):
            grads.weights[i] = np.asarray(a.T @ delta).T
        else:
            grads.weights[i] = delta.T @ a
        grads.biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * activation_grad(pre[i - 1], params.activation)
    return loss, grads


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MLPParams, lr: float = 1e-3, **kw) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], 0, lr, **kw)


def adam_step(params: MLPParams, grads: MLPParams, state: AdamState) -> tuple[MLPParams, AdamState]:
    """One Adam update, applied in place; returns ``(params, state)``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for theta, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if theta.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    snapshot_every: int = 250
    max_iterations: int = 3000
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.snapshot_every < 1 or self.max_iterations < 1:
            raise ValueError("batch_size, snapshot_every and max_iterations must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class TrainResult:
    params: MLPParams  # best snapshot by the validation metric
    log: list[tuple[int, float, float]] = field(default_factory=list)
    best_iteration: int = 0
    final_params: MLPParams | None = None


def train(X_train, y_train, X_val, y_val, model_config: ModelConfig, train_config: TrainConfig,
          metric_fn: Callable | None = None) -> TrainResult:
    """Mini-batch Adam training with periodic validation snapshots.

    Every ``snapshot_every`` iterations (and after the last one) the current
    parameters are scored on the validation set with ``metric_fn(y, p)``
    (average precision by default); the best-scoring snapshot is returned.
    Ties keep the earlier snapshot.
    """
    if metric_fn is None:
        from .evaluation import average_precision as metric_fn
    X_train = _as_batch(X_train, model_config.input_dim)
    X_val = _as_batch(X_val, model_config.input_dim)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    n = X_train.shape[0]
    if n == 0 or n != y_train.shape[0] or X_val.shape[0] != y_val.shape[0]:
        raise ValueError("inconsistent training/validation sizes")

    params = init_params(model_config)
    state = AdamState.fresh(params, lr=train_config.lr)
    rng = np.random.default_rng(train_config.seed)
    bs = train_config.batch_size

    result = TrainResult(params.copy())
    best = -np.inf
    order = rng.permutation(n)
    pos = 0
    running = []
    for it in range(1, train_config.max_iterations + 1):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        try:
            loss, grads = loss_and_gradients(params, X_train[idx], y_train[idx])
        except NonFiniteError as exc:
            raise NonFiniteError(f"training diverged at iteration {it}: {exc}",
                                 exc.layer, it) from None
        if not np.isfinite(loss):
            raise NonFiniteError(f"training diverged at iteration {it}: loss {loss}", iteration=it)
        adam_step(params, grads, state)
        running.append(loss)
        if it % train_config.snapshot_every == 0 or it == train_config.max_iterations:
            score = float(metric_fn(y_val, forward(params, X_val)))
            result.log.append((it, float(np.mean(running)), score))
            log.info("iter %d loss %.5f val %.5f", it, np.mean(running), score)
            running = []
            if score > best:
                best = score
                result.params = params.copy()
                result.best_iteration = it
    result.final_params = params
    return result


def write_train_log(entries: Sequence[tuple[int, float, float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration\tloss\tval_ap\n")
        for it, loss, ap in entries:
            fh.write(f"{it}\t{loss:.10f}\t{ap:.10f}\n")


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = "PALLISCREEN-MLP"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: MLPParams, path, vocab_checksum: str = "") -> None:
    """Text header line followed by little-endian float64 weight/bias arrays.

    Header: ``MAGIC VERSION input_dim hidden,dims activation checksum``
    (tab-separated). Arrays follow layer by layer, weight then bias, row-major.
    """
    hidden = ",".join(str(h) for h in params.hidden_dims)
    header = (f"{CHECKPOINT_MAGIC}\t{CHECKPOINT_VERSION}\t{params.input_dim}\t{hidden}\t"
              f"{params.activation}\t{vocab_checksum or '-'}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MLPParams, str]:
    """Return ``(params, vocabulary checksum)``."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    try:
        magic, version, in_dim, hidden, act, checksum = data[:nl].decode("ascii").split("\t")
        version, in_dim = int(version), int(in_dim)
        hidden_dims = tuple(int(h) for h in hidden.split(","))
    except (ValueError, UnicodeDecodeError):
        raise ValueError(f"{path}: unreadable checkpoint header") from None
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    if act not in ACTIVATIONS:
        raise ValueError(f"{path}: unknown activation {act}")
    dims = (in_dim,) + hidden_dims + (1,)
    body = memoryview(data)[nl + 1:]
    expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:])) * 8
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} bytes of parameters, found {len(body)}")
    weights, biases, off = [], [], 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(body, "<f8", n_out * n_in, off).reshape(n_out, n_in).astype(np.float64)
        off += n_out * n_in * 8
        b = np.frombuffer(body, "<f8", n_out, off).astype(np.float64)
        off += n_out * 8
        weights.append(w)
        biases.append(b)
    return MLPParams(weights, biases, act), ("" if checksum == "-" else checksum)
