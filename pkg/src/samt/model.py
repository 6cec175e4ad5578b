"""Bias-free multilayer perceptron: forward pass, losses, per-block gradients.

The prediction function is a chain of linear layers with LeakyReLU after
every layer except the last.  Batches are column-per-sample: an input
batch has shape (in_features, batch).  Layer l stores its weight as an
(out_l, in_l) matrix, so adjacent layers must chain:
W[l+1].shape[1] == W[l].shape[0].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import LabelError, ShapeError
from .numerics import Matrix

MSE = "mse"
SOFTMAX_CE = "softmax_ce"
LOSS_KINDS = (MSE, SOFTMAX_CE)


@dataclass(frozen=True)
class NetworkModel:
    """Weights plus the two knobs that define the prediction function."""

    layer_weights: tuple[Matrix, ...]
    activation_slope: float = 0.01
    loss_kind: str = SOFTMAX_CE

    def __post_init__(self):
        if not self.layer_weights:
            raise ShapeError("network needs at least one layer")
        if not 0.0 < self.activation_slope < 1.0:
            raise ValueError(f"activation_slope must be in (0,1), got {self.activation_slope}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        for l in range(len(self.layer_weights) - 1):
            out_l = self.layer_weights[l].shape[0]
            in_next = self.layer_weights[l + 1].shape[1]
            if out_l != in_next:
                raise ShapeError(
                    f"layer {l} outputs {out_l} features but layer {l + 1} expects {in_next}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layer_weights)

    def with_layers(self, updates: dict[int, Matrix]) -> "NetworkModel":
        """Copy of the network with some layer weights replaced."""
        new = list(self.layer_weights)
        for l, w in updates.items():
            if w.shape != new[l].shape:
                raise ShapeError(
                    f"replacement for layer {l} has shape {w.shape}, expected {new[l].shape}"
                )
            new[l] = w
        return replace(self, layer_weights=tuple(new))


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward pass."""

    inputs: Matrix
    pre_activations: list[Matrix]   # z_l = W_l @ a_{l-1}, one per layer
    post_activations: list[Matrix]  # a_l, one per layer (last entry == output)


def glorot_init(shape: tuple[int, int], rng: np.random.Generator) -> Matrix:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    out_f, in_f = shape
    limit = np.sqrt(6.0 / (in_f + out_f))
    return rng.uniform(-limit, limit, size=shape)


def init_network(widths, rng, activation_slope=0.01, loss_kind=SOFTMAX_CE) -> NetworkModel:
    """Build a network from a width chain like (784, 100, 10)."""
    if len(widths) < 2:
        raise ShapeError(f"need at least two widths, got {widths}")
    weights = tuple(
        glorot_init((widths[i + 1], widths[i]), rng) for i in range(len(widths) - 1)
    )
    return NetworkModel(weights, activation_slope=activation_slope, loss_kind=loss_kind)


def leaky_relu(x: Matrix, slope: float) -> tuple[Matrix, Matrix]:
    """Return (value, derivative); the derivative at exactly 0 is `slope`."""
    positive = x > 0
    value = np.where(positive, x, slope * x)
    derivative = np.where(positive, 1.0, slope)
    return value, derivative


def forward(net: NetworkModel, batch_x: Matrix) -> tuple[Matrix, ForwardCache]:
    """Run the network on a (in_features, batch) input.

    Returns the (out_features, batch) output and the cache of every
    intermediate needed for backpropagation.
    """
    a = np.asarray(batch_x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {a.shape}")
    pre, post = [], []
    for l, w in enumerate(net.layer_weights):
        if w.shape[1] != a.shape[0]:
            raise ShapeError(
                f"layer {l} expects {w.shape[1]} input features, got {a.shape[0]}"
            )
        z = w @ a
        pre.append(z)
        if l < net.num_layers - 1:
            a, _ = leaky_relu(z, net.activation_slope)
        else:
            a = z
        post.append(a)
    return post[-1], ForwardCache(inputs=np.asarray(batch_x, dtype=np.float64), pre_activations=pre, post_activations=post)


def mse_loss(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """Mean (over batch columns) squared error, summed over output rows.

    Returns the scalar loss and d(loss)/d(pred) = (2/b)(pred - target).
    """
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    b = pred.shape[1]
    diff = pred - target
    loss = float(np.sum(diff * diff) / b)
    return loss, (2.0 / b) * diff


def softmax_ce_loss(logits: Matrix, labels) -> tuple[float, Matrix]:
    """Softmax cross-entropy over batch columns, log-sum-exp stabilized.

    `labels` are integer class indices (one per column).  Returns the
    mean negative log-likelihood and d(loss)/d(logits).
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[1]:
        raise ShapeError(
            f"need one label per column: {labels.shape} labels for logits {logits.shape}"
        )
    k, b = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise LabelError(f"label {bad} outside [0, {k})")
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=0, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = float(-log_probs[labels, np.arange(b)].mean())
    dlogits = exp / total
    dlogits[labels, np.arange(b)] -= 1.0
    return loss, dlogits / b


def softmax_columns(logits: Matrix) -> Matrix:
    """Column-wise softmax (shift-stabilized); columns sum to 1."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=0, keepdims=True)


def batch_loss(net: NetworkModel, batch) -> float:
    """Loss of the network on (x, y) under its own loss kind."""
    x, y = batch
    out, _ = forward(net, x)
    if net.loss_kind == MSE:
        return mse_loss(out, y)[0]
    return softmax_ce_loss(out, y)[0]


def block_loss_and_gradients(net: NetworkModel, batch, block) -> tuple[float, dict[int, Matrix]]:
    """Batch loss plus d(loss)/dW_l for each layer l in `block`.

    Gradients are the ordinary backpropagation partials with every other
    layer held at its current value; layers outside the block are not
    returned.
    """
    block = tuple(block)
    if not block:
        raise ValueError("block must contain at least one layer index")
    for l in block:
        if not 0 <= l < net.num_layers:
            raise ValueError(f"layer index {l} outside [0, {net.num_layers})")
    x, y = batch
    out, cache = forward(net, x)
    if net.loss_kind == MSE:
        loss, delta = mse_loss(out, y)
    else:
        loss, delta = softmax_ce_loss(out, y)

    wanted = set(block)
    lowest = min(wanted)
    grads: dict[int, Matrix] = {}
    for l in range(net.num_layers - 1, lowest - 1, -1):
        a_prev = cache.post_activations[l - 1] if l > 0 else cache.inputs
        if l in wanted:
            grads[l] = delta @ a_prev.T
        if l > lowest:
            _, d_act = leaky_relu(cache.pre_activations[l - 1], net.activation_slope)
            delta = (net.layer_weights[l].T @ delta) * d_act
    return loss, grads


def block_gradient(net: NetworkModel, batch, block) -> dict[int, Matrix]:
    """Per-layer gradients for the block (see block_loss_and_gradients)."""
    return block_loss_and_gradients(net, batch, block)[1]
