"""Small dense neural networks in numpy.

Everything here is float64 and single-threaded. Networks are plain data
(:class:`DenseNet`) and the free functions operate on them, so the same net can
be shared read-only between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from ._validation import as_matrix, check_finite, check_is_fitted, check_same_rows

ACTIVATIONS = ("linear", "relu", "sigmoid")
LOSSES = ("mse", "bce")
BCE_EPS = 1e-7


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""

    def __init__(self, step: int, trace=None):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.trace = trace


@dataclass
class Layer:
    weights: np.ndarray  # (fan_in, fan_out)
    biases: np.ndarray  # (fan_out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.biases = np.array(self.biases, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.biases.shape[0] != self.weights.shape[1]:
            raise ValueError("bias length must equal layer output width")
        check_finite(self.weights, "weights")
        check_finite(self.biases, "biases")


@dataclass
class DenseNet:
    layers: List[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a DenseNet needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise ValueError(
                    f"layer widths do not chain: {a.weights.shape} -> {b.weights.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[1]

    @property
    def sizes(self) -> List[int]:
        return [self.input_dim] + [layer.weights.shape[1] for layer in self.layers]

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers]
        )

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.biases])
        return out

    def __call__(self, batch) -> np.ndarray:
        return forward(self, batch)

    def __eq__(self, other):
        if not isinstance(other, DenseNet) or len(self.layers) != len(other.layers):
            return False
        return all(
            a.activation == b.activation
            and np.array_equal(a.weights, b.weights)
            and np.array_equal(a.biases, b.biases)
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    train_steps: int = 10_000
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.train_steps < 0:
            raise ValueError("train_steps must be non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


def init_net(
    sizes: Sequence[int],
    hidden_activation: str = "relu",
    output_activation: str = "linear",
    rng: Optional[np.random.Generator] = None,
) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2:
        raise ValueError("sizes must list at least input and output widths")
    rng = np.random.default_rng(0) if rng is None else rng
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        act = output_activation if k == len(sizes) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


def _activate(z, activation):
    if activation == "linear":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    # split on sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activation_grad(z, a, activation):
    if activation == "linear":
        return np.ones_like(z)
    if activation == "relu":
        # subgradient at 0 is 0
        return (z > 0).astype(np.float64)
    return a * (1.0 - a)


def _forward_cache(net: DenseNet, batch: np.ndarray):
    acts = [batch]
    pre = []
    a = batch
    for layer in net.layers:
        z = a @ layer.weights + layer.biases
        a = _activate(z, layer.activation)
        pre.append(z)
        acts.append(a)
    return pre, acts


def forward(net: DenseNet, batch) -> np.ndarray:
    """Evaluate ``net`` on a 2-D batch, returning ``(rows, output_dim)``."""
    batch = as_matrix(batch, "batch")
    if batch.shape[1] != net.input_dim:
        raise ValueError(
            f"batch has {batch.shape[1]} columns, net expects {net.input_dim}"
        )
    return _forward_cache(net, batch)[1][-1]


def loss_value(kind: str, predicted, target, diagnostics: Optional[dict] = None) -> float:
    """Mean loss over every entry.

    For ``bce`` the predictions are clamped into ``[1e-7, 1 - 1e-7]``; when
    clamping changes anything and ``diagnostics`` is given, its ``"clamped"``
    entry is set to the number of clamped entries.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {target.shape}")
    if kind == "mse":
        return float(np.mean((predicted - target) ** 2))
    if kind == "bce":
        clipped = np.clip(predicted, BCE_EPS, 1.0 - BCE_EPS)
        if diagnostics is not None:
            diagnostics["clamped"] = int(np.count_nonzero(clipped != predicted))
        return float(
            -np.mean(target * np.log(clipped) + (1.0 - target) * np.log1p(-clipped))
        )
    raise ValueError(f"unknown loss {kind!r}")


def loss_grad(kind: str, predicted: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d loss / d predicted for the mean-reduced losses."""
    n = predicted.size
    if kind == "mse":
        return 2.0 * (predicted - target) / n
    if kind == "bce":
        p = np.clip(predicted, BCE_EPS, 1.0 - BCE_EPS)
        return (p - target) / (p * (1.0 - p)) / n
    raise ValueError(f"unknown loss {kind!r}")


def backprop(net: DenseNet, cache, grad_out: np.ndarray, fused_bce: bool = False):
    """Push ``grad_out`` (d loss / d output) back through a cached forward pass.

    Returns ``(grads, grad_input)`` where ``grads`` is a list of
    ``(d_weights, d_biases)`` per layer. With ``fused_bce`` the output gradient
    is taken to be ``d loss / d pre-activation`` of a sigmoid head already.
    """
    pre, acts = cache
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    delta = grad_out
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if not (fused_bce and k == len(net.layers) - 1):
            delta = delta * _activation_grad(pre[k], acts[k + 1], layer.activation)
        grads[k] = (acts[k].T @ delta, delta.sum(axis=0))
        delta = delta @ layer.weights.T
    return grads, delta


def backward(net: DenseNet, batch, target, kind: str = "mse", upstream_scale: float = 1.0):
    """Analytic gradients of ``upstream_scale * loss_value(kind, net(batch), target)``.

    Returns ``(grads, grad_input)``; ``grads`` holds ``(d_weights, d_biases)`` per
    layer in the shapes of the parameters.
    """
    batch = as_matrix(batch, "batch")
    target = as_matrix(target, "target")
    if batch.shape[1] != net.input_dim:
        raise ValueError("batch width does not match the network input")
    if target.shape != (batch.shape[0], net.output_dim):
        raise ValueError("target shape does not match the network output")
    cache = _forward_cache(net, batch)
    out = cache[1][-1]
    fused = kind == "bce" and net.layers[-1].activation == "sigmoid"
    if fused:
        # sigmoid + bce collapses to (p - t) / n at the pre-activation
        g = (out - target) / out.size
    else:
        g = loss_grad(kind, out, target)
    grads, dx = backprop(net, cache, g * upstream_scale, fused)
    return grads, dx


def apply_gradients(net: DenseNet, grads, learning_rate: float) -> None:
    for layer, (dw, db) in zip(net.layers, grads):
        layer.weights -= learning_rate * dw
        layer.biases -= learning_rate * db


def sgd_train(net: DenseNet, inputs, targets, cfg: TrainConfig, rng=None):
    """Plain minibatch SGD with replacement sampling.

    Returns ``(trained_net, loss_trace)``; the input net is left untouched. The
    trace holds the minibatch loss before each update.
    """
    inputs = as_matrix(inputs, "inputs")
    targets = as_matrix(targets, "targets")
    check_same_rows(inputs, targets)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    net = net.copy()
    trace = np.empty(cfg.train_steps)
    n = inputs.shape[0]
    # overflow surfaces as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.train_steps):
            idx = rng.integers(0, n, size=cfg.batch_size)
            xb, yb = inputs[idx], targets[idx]
            trace[step] = loss_value(cfg.loss, forward(net, xb), yb)
            if not np.isfinite(trace[step]):
                raise DivergenceError(step, trace[: step + 1])
            grads, _ = backward(net, xb, yb, cfg.loss)
            apply_gradients(net, grads, cfg.learning_rate)
    return net, trace


def _numeric_grad(f, arr: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def gradient_check(net: DenseNet, batch, target, kind: str = "mse", h: float = 1e-5) -> float:
    """Max relative error between :func:`backward` and central differences.

    Covers every weight, bias and input entry. The relative error denominator
    is ``max(|a|, |b|, 1e-8)``.
    """
    batch = as_matrix(batch, "batch").copy()
    target = as_matrix(target, "target")
    if batch.shape[0] > 8:
        raise ValueError("gradient_check is limited to batches of at most 8 rows")
    net = net.copy()
    grads, dx = backward(net, batch, target, kind)

    def f():
        return loss_value(kind, forward(net, batch), target)

    worst = 0.0
    pairs = []
    for layer, (dw, db) in zip(net.layers, grads):
        pairs.append((layer.weights, dw))
        pairs.append((layer.biases, db))
    pairs.append((batch, dx))
    for arr, analytic in pairs:
        numeric = _numeric_grad(f, arr, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


class _DenseNetEstimator(BaseEstimator):
    _loss = "mse"
    _output_activation = "linear"

    def __init__(self, hidden_layer_sizes=(), learning_rate=0.01, batch_size=16,
                 train_steps=10_000, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.random_state = random_state

    def _fit(self, X, y):
        X = as_matrix(X, "X")
        y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], -1)
        cfg = TrainConfig(self.learning_rate, self.batch_size, self.train_steps,
                          self.random_state, self._loss)
        rng = np.random.default_rng(cfg.seed)
        sizes = [X.shape[1], *self.hidden_layer_sizes, y.shape[1]]
        net = init_net(sizes, "relu", self._output_activation, rng)
        self.net_, self.loss_curve_ = sgd_train(net, X, y, cfg, rng=rng)
        self.n_features_in_ = X.shape[1]
        return self


class DenseRegressor(RegressorMixin, _DenseNetEstimator):
    """Feed-forward regressor trained with SGD on mean squared error."""

    def fit(self, X, y):
        return self._fit(X, y)

    def predict(self, X):
        check_is_fitted(self, "net_")
        out = forward(self.net_, X)
        return out[:, 0] if out.shape[1] == 1 else out


class DenseClassifier(ClassifierMixin, _DenseNetEstimator):
    """Binary classifier with a sigmoid head trained on cross entropy.

    With ``hidden_layer_sizes=()`` this is logistic regression fitted by SGD.
    """

    _loss = "bce"
    _output_activation = "sigmoid"

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.float64)
        self.classes_ = np.array([0.0, 1.0])
        return self._fit(X, y)

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        p = forward(self.net_, X)[:, 0]
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.float64)
