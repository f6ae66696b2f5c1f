"""Small numpy neural-network engine operating on flat parameter vectors.

Two fixed architectures are supported: multinomial logistic regression and a
one-hidden-layer ReLU MLP.  Parameters always live in a single contiguous
float64 vector so that federated exchange and averaging can treat every model
uniformly.  Layout is weights (row-major, ``input x output``) followed by the
bias, layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, RingFedError


@dataclass(frozen=True)
class LogisticRegression:
    input_dim: int
    num_classes: int

    @property
    def param_count(self) -> int:
        return self.input_dim * self.num_classes + self.num_classes

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(self.input_dim, self.num_classes)]


@dataclass(frozen=True)
class MLP:
    input_dim: int
    hidden_dim: int
    num_classes: int

    @property
    def param_count(self) -> int:
        return (
            self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.num_classes
            + self.num_classes
        )

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]


Model = LogisticRegression | MLP


def _unpack(model: Model, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Return ``(weight, bias)`` views into ``params`` for each layer."""
    if params.ndim != 1 or params.shape[0] != model.param_count:
        raise RingFedError(
            f"parameter vector has shape {params.shape}, expected ({model.param_count},)"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in model.layer_shapes():
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_params(model: Model, seed: int) -> np.ndarray:
    """Uniform fan-in scaled weights, zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    params = np.zeros(model.param_count, dtype=np.float64)
    for w, _ in _unpack(model, params):
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def _check_batch(model: Model, x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"batch features have shape {x.shape}, model expects input_dim={model.input_dim}"
        )
    if x.shape[0] == 0:
        raise ConfigurationError("empty batch")
    if y.shape != (x.shape[0],):
        raise ConfigurationError(f"labels shape {y.shape} does not match {x.shape[0]} examples")


def _forward(model: Model, params: np.ndarray, x: np.ndarray):
    """Logits plus the cached activations needed for backprop."""
    layers = _unpack(model, params)
    if isinstance(model, LogisticRegression):
        (w, b), = layers
        return x @ w + b, None
    (w1, b1), (w2, b2) = layers
    hidden = np.maximum(x @ w1 + b1, 0.0)
    return hidden @ w2 + b2, hidden


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_proba(model: Model, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"batch features have shape {x.shape}, model expects input_dim={model.input_dim}"
        )
    logits, _ = _forward(model, params, x)
    return np.exp(_log_softmax(logits))


def forward_loss(model: Model, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, int]:
    """Mean cross-entropy over the batch and the number of correct argmax predictions."""
    _check_batch(model, x, y)
    logits, _ = _forward(model, params, x)
    logp = _log_softmax(logits)
    rows = np.arange(x.shape[0])
    loss = -float(logp[rows, y].mean())
    correct = int((logits.argmax(axis=1) == y).sum())
    return max(loss, 0.0), correct


def backward(model: Model, params: np.ndarray, x: np.ndarray, y: np.ndarray,
             out: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the mean batch cross-entropy with respect to ``params``.

    ``out`` may supply a preallocated buffer of the parameter shape.
    """
    _check_batch(model, x, y)
    logits, hidden = _forward(model, params, x)
    n = x.shape[0]
    dlogits = np.exp(_log_softmax(logits))
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    grad = np.empty_like(params) if out is None else out
    glayers = _unpack(model, grad)
    if isinstance(model, LogisticRegression):
        (gw, gb), = glayers
        np.matmul(x.T, dlogits, out=gw)
        np.sum(dlogits, axis=0, out=gb)
        return grad

    (_, _), (w2, _) = _unpack(model, params)
    (gw1, gb1), (gw2, gb2) = glayers
    np.matmul(hidden.T, dlogits, out=gw2)
    np.sum(dlogits, axis=0, out=gb2)
    dhidden = dlogits @ w2.T
    dhidden[hidden <= 0.0] = 0.0
    np.matmul(x.T, dhidden, out=gw1)
    np.sum(dhidden, axis=0, out=gb1)
    return grad


@dataclass
class OptimizerState:
    """SGD with classical momentum and per-round exponential learning-rate decay.

    ``round_index`` is the communication round the optimizer is used in; the
    step size is ``learning_rate * lr_decay ** round_index``.
    """

    learning_rate: float
    momentum: float = 0.0
    lr_decay: float = 1.0
    round_index: int = 0
    velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1], got {self.momentum}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")

    @property
    def effective_lr(self) -> float:
        return self.learning_rate * self.lr_decay**self.round_index


def sgd_step_(params: np.ndarray, grad: np.ndarray, opt: OptimizerState) -> np.ndarray:
    """In-place :func:`sgd_step`: updates ``params`` and clobbers ``grad``."""
    if params.shape != grad.shape:
        raise RingFedError(f"gradient shape {grad.shape} does not match params {params.shape}")
    lr = opt.effective_lr
    if opt.momentum != 0.0:
        if opt.velocity is None:
            opt.velocity = np.zeros_like(params)
        elif opt.velocity.shape != params.shape:
            raise RingFedError(f"velocity shape {opt.velocity.shape} does not match params {params.shape}")
        opt.velocity *= opt.momentum
        opt.velocity += grad
        np.multiply(opt.velocity, lr, out=grad)
    else:
        grad *= lr
    params -= grad
    return params


def sgd_step(params: np.ndarray, grad: np.ndarray, opt: OptimizerState) -> np.ndarray:
    """One SGD update; returns new params and advances ``opt.velocity`` in place.

    With momentum ``beta``: ``v = beta * v + g`` then ``w - lr * v``.
    """
    return sgd_step_(params.copy(), np.array(grad, dtype=np.float64), opt)
