"""Classifier head: parameterization, objective, gradients, local SGD.

The model is a two-dense-layer network over fixed-length feature vectors:

    logits = relu(x @ W1 + b1) @ W2 + b2
    probs  = softmax(logits)

Parameters travel as a single flat float64 vector in a fixed layout
(C order throughout):

    W1  (input_dim, hidden_dim)   row-major, rows indexed by input coord
    b1  (hidden_dim,)
    W2  (hidden_dim, num_classes) row-major
    b2  (num_classes,)

so the total length is ``(input_dim + 1) * hidden_dim +
(hidden_dim + 1) * num_classes``.

The training objective on a batch is the mean cross-entropy plus
``reg_weight * ||theta||^2`` (squared euclidean norm over *all*
parameters, biases included). Labels are 0-based here; external files
use 1..4 and are converted at the data layer.

Dropout (inverted scaling on the hidden layer) is available through
:func:`forward` for stochastic prediction, but the SGD path trains the
deterministic objective above, which keeps the single-step behaviour of
:func:`train_local` exactly equal to one explicit gradient step.

Parameter file format (``save_params`` / ``load_params``)::

    fedhorizon-params v1 <count>
    <one float64 per line>

Values are written as C99 hex-floats (canonical, exact round-trip);
plain decimal literals are accepted on read.
"""

from dataclasses import dataclass

import numpy as np

from fedhorizon import backend
from fedhorizon.errors import DataError

PARAMS_MAGIC = "fedhorizon-params v1"


@dataclass(frozen=True)
class ModelSpec:
    """Shape of the classifier head."""

    input_dim: int
    hidden_dim: int = 64
    num_classes: int = 4
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim, hidden_dim and num_classes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def num_parameters(self):
        return (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes


@dataclass(frozen=True)
class Hyperparameters:
    """Local SGD settings shared by every node unless overridden."""

    learning_rate: float
    local_epochs: int = 1
    batch_size: int = 32
    reg_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reg_weight < 0.0:
            raise ValueError("reg_weight must be >= 0")


def split_params(spec, params):
    """Views (w1, b1, w2, b2) into a flat parameter vector."""
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    params = np.ascontiguousarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.num_parameters:
        raise ValueError(
            f"parameter vector has length {params.size}, spec requires {spec.num_parameters}"
        )
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * k
    w1 = params[:o1].reshape(d, h)
    b1 = params[o1:o2]
    w2 = params[o2:o3].reshape(h, k)
    b2 = params[o3:]
    return w1, b1, w2, b2


def check_params(spec, params):
    """Validate length and finiteness; returns the float64 vector."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    split_params(spec, params)
    if not np.all(np.isfinite(params)):
        raise ValueError("parameter vector contains non-finite entries")
    return params


def init_parameters(spec, seed):
    """Deterministic scaled-uniform initialization.

    Weights are drawn uniformly in +-sqrt(6 / (fan_in + fan_out)), first
    W1 then W2 from a single PCG64 stream seeded with ``seed``; biases
    are zero.
    """
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.num_parameters, dtype=np.float64)
    w1, _, w2, _ = split_params(spec, params)
    bound1 = np.sqrt(6.0 / (d + h))
    bound2 = np.sqrt(6.0 / (h + k))
    w1[...] = rng.uniform(-bound1, bound1, size=(d, h))
    w2[...] = rng.uniform(-bound2, bound2, size=(h, k))
    return params


def _as_batch(spec, features, labels):
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    y = np.ascontiguousarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"feature matrix has width {x.shape[-1]}, spec requires {spec.input_dim}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[0] != y.shape[0]:
        raise ValueError("features and labels disagree in length")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"label out of range 0..{spec.num_classes - 1}")
    return x, y


def forward(spec, params, features, dropout_enabled=False, seed=0):
    """Probability vector for a single feature vector.

    With ``dropout_enabled`` the hidden layer is masked with keep
    probability ``1 - dropout_rate`` and rescaled by its inverse
    (inverted dropout), so the expectation matches the deterministic
    pass. The mask is drawn from a PCG64 stream seeded with ``seed``.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"feature vector has shape {x.shape}, spec requires ({spec.input_dim},)")
    w1, b1, w2, b2 = split_params(spec, params)
    if not dropout_enabled or spec.dropout_rate == 0.0:
        return backend.predict_probs(w1, b1, w2, b2, x[None, :])[0]
    keep = 1.0 - spec.dropout_rate
    rng = np.random.default_rng(seed)
    hidden = np.maximum(x @ w1 + b1, 0.0)
    hidden = hidden * (rng.random(spec.hidden_dim) < keep) / keep
    logits = hidden @ w2 + b2
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def empirical_risk(spec, params, features, labels, reg_weight):
    """Mean cross-entropy over the batch plus ``reg_weight * ||theta||^2``.

    ``features`` is (n, input_dim), ``labels`` 0-based ints. The
    cross-entropy probability is floored at 1e-12 before the log.
    """
    params = check_params(spec, params)
    x, y = _as_batch(spec, features, labels)
    w1, b1, w2, b2 = split_params(spec, params)
    probs = backend.predict_probs(w1, b1, w2, b2, x)
    py = probs[np.arange(x.shape[0]), y]
    data_loss = float(-np.log(np.maximum(py, backend.PROB_FLOOR)).mean())
    return data_loss + reg_weight * float(params @ params)


def gradient(spec, params, features, labels, reg_weight):
    """Analytic gradient of :func:`empirical_risk`, as a flat vector."""
    params = check_params(spec, params)
    x, y = _as_batch(spec, features, labels)
    w1, b1, w2, b2 = split_params(spec, params)
    _, gw1, gb1, gw2, gb2 = backend.loss_and_grad(w1, b1, w2, b2, x, y, reg_weight)
    return np.concatenate([np.ravel(gw1), np.ravel(gb1), np.ravel(gw2), np.ravel(gb2)])


def finite_difference_gradient(spec, params, features, labels, reg_weight, eps=1e-5):
    """Central-difference gradient, the testing oracle for :func:`gradient`."""
    if eps <= 0.0:
        raise ValueError("eps must be > 0")
    params = check_params(spec, params)
    grad = np.empty_like(params)
    probe = params.copy()
    for i in range(params.size):
        orig = probe[i]
        probe[i] = orig + eps
        up = empirical_risk(spec, probe, features, labels, reg_weight)
        probe[i] = orig - eps
        down = empirical_risk(spec, probe, features, labels, reg_weight)
        probe[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad


def train_local(spec, params, features, labels, hyper):
    """Mini-batch SGD over the local dataset; returns new parameters.

    Algorithm (documented for reproducibility): a PCG64 stream seeded
    with ``hyper.seed`` draws one permutation per epoch; consecutive
    slices of ``batch_size`` indices form the mini-batches; within a
    batch, samples are processed in ascending original index order. One
    gradient step ``theta -= learning_rate * grad`` per batch. With
    ``local_epochs=1`` and ``batch_size >= n`` this is exactly one
    explicit gradient step on the full batch.

    Bitwise-reproducible for fixed (params, data order, hyper.seed) on a
    given backend.
    """
    params = check_params(spec, params)
    x, y = _as_batch(spec, features, labels)
    n = x.shape[0]
    out = params.copy()
    w1, b1, w2, b2 = split_params(spec, out)
    lr = hyper.learning_rate
    rng = np.random.default_rng(hyper.seed)
    for _ in range(hyper.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = np.sort(perm[start:start + hyper.batch_size])
            _, gw1, gb1, gw2, gb2 = backend.loss_and_grad(
                w1, b1, w2, b2, x[idx], y[idx], hyper.reg_weight
            )
            w1 -= lr * gw1
            b1 -= lr * gb1
            w2 -= lr * gw2
            b2 -= lr * gb2
    return out


def predict_labels(spec, params, features):
    """Argmax class (0-based) for each row of ``features``."""
    params = check_params(spec, params)
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"feature matrix has width {x.shape[-1]}, spec requires {spec.input_dim}")
    w1, b1, w2, b2 = split_params(spec, params)
    probs = backend.predict_probs(w1, b1, w2, b2, x)
    return np.argmax(probs, axis=1)


def save_params(path, params):
    """Write a parameter vector in the canonical hex-float file form."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{PARAMS_MAGIC} {params.size}\n")
        for v in params:
            fh.write(float(v).hex() + "\n")


def load_params(path):
    """Read a parameter file; accepts hex-float or decimal entries."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        parts = header.rsplit(" ", 1)
        if len(parts) != 2 or parts[0] != PARAMS_MAGIC or not parts[1].isdigit():
            raise DataError(f"{path}: bad parameter file header {header!r}")
        count = int(parts[1])
        values = np.empty(count, dtype=np.float64)
        for i in range(count):
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: expected {count} values, file ends at {i}")
            token = line.strip()
            try:
                if "x" in token or "X" in token:
                    values[i] = float.fromhex(token)
                else:
                    values[i] = float(token)
            except ValueError as exc:
                raise DataError(f"{path}: bad value on line {i + 2}: {token!r}") from exc
        if fh.readline().strip():
            raise DataError(f"{path}: trailing content after {count} values")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite parameter values")
    return values
