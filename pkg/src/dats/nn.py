"""Dense feedforward networks with hand-written backpropagation.

Layers store weights as ``(out, in)`` matrices and act on row-major
minibatches, so a layer computes ``x @ W.T + b``.  A layer tagged
``"softmax"`` produces logits; the softmax itself is applied by the loss
(``weighted_cross_entropy``) or by :func:`softmax` at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError

ACTIVATIONS = ("relu", "identity", "softmax")


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    kind: str = "momentum"
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.kind not in ("sgd", "momentum"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    output_activation: str = "identity",
) -> list[DenseLayer]:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2:
        raise ConfigurationError("need at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(
            DenseLayer(
                rng.uniform(-limit, limit, size=(fan_out, fan_in)),
                np.zeros(fan_out),
                act,
            )
        )
    return layers


def _check_chain(x: np.ndarray, params: Sequence[DenseLayer]) -> None:
    width = x.shape[1]
    for i, layer in enumerate(params):
        if layer.fan_in != width:
            raise ConfigurationError(
                f"layer {i} expects {layer.fan_in} inputs, got {width}"
            )
        width = layer.fan_out


def mlp_forward(x, params: Sequence[DenseLayer]) -> tuple[np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_chain(x, params)
    cache = ForwardCache()
    out = x
    for layer in params:
        cache.inputs.append(out)
        pre = out @ layer.weight.T + layer.bias
        cache.preacts.append(pre)
        out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return out, cache


def mlp_backward(
    cache: ForwardCache, params: Sequence[DenseLayer], grad_output
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate ``grad_output`` (dLoss/dOutput) through the network.

    Returns per-layer ``(dW, db)`` pairs and dLoss/dInput.
    """
    if len(cache.inputs) != len(params):
        raise UsageError("cache was produced by a network of different depth")
    grad = np.asarray(grad_output, dtype=np.float64)
    if grad.shape != cache.preacts[-1].shape:
        raise UsageError(
            f"grad_output shape {grad.shape} does not match cached output "
            f"{cache.preacts[-1].shape}"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)  # type: ignore
    for i in range(len(params) - 1, -1, -1):
        layer = params[i]
        if cache.preacts[i].shape[1] != layer.fan_out:
            raise UsageError(f"stale cache at layer {i}")
        if layer.activation == "relu":
            grad = grad * (cache.preacts[i] > 0)
        grads[i] = (grad.T @ cache.inputs[i], grad.sum(axis=0))
        grad = grad @ layer.weight
    return grads, grad


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits (1-D)."""
    return probs * (grad_probs - probs @ grad_probs)


def weighted_cross_entropy(logits, labels, weights) -> tuple[float, np.ndarray]:
    """Sum of per-sample weighted negative log-likelihoods and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    n, k = logits.shape
    if labels.shape != (n,) or weights.shape != (n,):
        raise UsageError("labels and weights must have one entry per row")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must lie in [0, {k})")
    bad = np.flatnonzero(~np.isfinite(logits).all(axis=1))
    if bad.size:
        raise NumericError(f"non-finite logits at row {bad[0]}")
    if not np.isfinite(weights).all():
        raise NumericError("non-finite sample weights")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = log_norm - shifted[rows, labels]
    loss = float(weights @ nll)
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad *= weights[:, None]
    return loss, grad


def gradient_reversal(grad_input, strength: float) -> np.ndarray:
    """Backward rule of the reversal layer (its forward pass is the identity)."""
    return -strength * np.asarray(grad_input, dtype=np.float64)


def optimizer_step(
    params: Sequence[DenseLayer],
    grads: Sequence[tuple[np.ndarray, np.ndarray]],
    config: OptimizerConfig,
    state: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> tuple[list[DenseLayer], list[tuple[np.ndarray, np.ndarray]] | None]:
    """Return updated copies of ``params``; inputs are left untouched."""
    if len(grads) != len(params):
        raise UsageError("one gradient pair per layer required")
    for i, (layer, (dw, db)) in enumerate(zip(params, grads)):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise UsageError(f"gradient shape mismatch at layer {i}")
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError(f"non-finite gradient at layer {i}")
    lr = config.learning_rate
    if config.kind == "sgd":
        steps = grads
        new_state = state
    else:
        if state is None:
            state = [(np.zeros_like(dw), np.zeros_like(db)) for dw, db in grads]
        steps = [
            (config.momentum * vw + dw, config.momentum * vb + db)
            for (vw, vb), (dw, db) in zip(state, grads)
        ]
        new_state = steps
    new_params = [
        DenseLayer(layer.weight - lr * sw, layer.bias - lr * sb, layer.activation)
        for layer, (sw, sb) in zip(params, steps)
    ]
    return new_params, new_state


def flatten_params(params: Sequence[DenseLayer]) -> np.ndarray:
    return np.concatenate([np.r_[l.weight.ravel(), l.bias] for l in params])


def unflatten_params(vec, template: Sequence[DenseLayer]) -> list[DenseLayer]:
    vec = np.asarray(vec, dtype=np.float64)
    out, pos = [], 0
    for layer in template:
        nw, nb = layer.weight.size, layer.bias.size
        w = vec[pos:pos + nw].reshape(layer.weight.shape)
        b = vec[pos + nw:pos + nw + nb]
        pos += nw + nb
        out.append(DenseLayer(w, b, layer.activation))
    if pos != vec.size:
        raise UsageError("parameter vector length does not match template")
    return out
