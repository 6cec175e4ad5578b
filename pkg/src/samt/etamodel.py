"""The step-size model: a small MLP that maps gradient statistics to
a scale factor and a candidate step.

For a block whose step size has k entries, the model is a three-layer
MLP (5 -> hidden -> hidden -> 2k).  The first k outputs become the
scale factor beta, the last k the candidate step; both heads pass
through a unit-interval projection and are reshaped to the step-size
kind's shape.  The model is trained by plain gradient descent on the
loss a candidate weight update achieves on a held-aside mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import (
    NetworkModel,
    batch_loss,
    block_loss_and_gradients,
    glorot_init,
    leaky_relu,
)
from .numerics import Matrix, expand
from .stepsize import (
    ARM_FULL,
    GradFeatures,
    StepSizeKind,
    compose_step,
    project_unit,
    project_unit_derivative,
    reduce_to_kind,
)

NUM_FEATURES = 5
DEFAULT_HIDDEN = 64


@dataclass(frozen=True)
class EtaModel:
    """Three weight matrices plus the head bookkeeping for one block."""

    w1: Matrix  # hidden x 5
    w2: Matrix  # hidden x hidden
    w3: Matrix  # 2k x hidden
    kind: StepSizeKind
    head_shape: tuple[int, int]  # shape both heads are reshaped to
    activation_slope: float = 0.01
    projection_style: str = "tanh"
    meta_learning_rate: float = 1e-3
    bypass: bool = False

    def __post_init__(self):
        k = self.head_shape[0] * self.head_shape[1]
        if self.w3.shape[0] != 2 * k:
            raise ShapeError(
                f"output layer has {self.w3.shape[0]} rows, head shape {self.head_shape} needs {2 * k}"
            )

    @property
    def entry_count(self) -> int:
        return self.head_shape[0] * self.head_shape[1]

    @property
    def weights(self) -> tuple[Matrix, Matrix, Matrix]:
        return (self.w1, self.w2, self.w3)


@dataclass(frozen=True)
class EtaOutputs:
    beta: Matrix
    eta_hat: Matrix


def init_eta_model(
    kind: StepSizeKind,
    layer_shape: tuple[int, int],
    rng: np.random.Generator,
    hidden: int = DEFAULT_HIDDEN,
    activation_slope: float = 0.01,
    projection_style: str = "tanh",
    meta_learning_rate: float = 1e-3,
    bypass: bool = False,
) -> EtaModel:
    head_shape = kind.shape_for(layer_shape)
    k = head_shape[0] * head_shape[1]
    return EtaModel(
        w1=glorot_init((hidden, NUM_FEATURES), rng),
        w2=glorot_init((hidden, hidden), rng),
        w3=glorot_init((2 * k, hidden), rng),
        kind=kind,
        head_shape=head_shape,
        activation_slope=activation_slope,
        projection_style=projection_style,
        meta_learning_rate=meta_learning_rate,
        bypass=bypass,
    )


@dataclass
class _PsiCache:
    d_col: Matrix
    u1: Matrix
    h1: Matrix
    u2: Matrix
    h2: Matrix
    raw_beta: Matrix
    raw_eta: Matrix


def _psi_forward_cached(psi: EtaModel, d_col: Matrix) -> tuple[Matrix, Matrix, _PsiCache]:
    u1 = psi.w1 @ d_col
    h1, _ = leaky_relu(u1, psi.activation_slope)
    u2 = psi.w2 @ h1
    h2, _ = leaky_relu(u2, psi.activation_slope)
    u3 = psi.w3 @ h2
    k = psi.entry_count
    raw_beta, raw_eta = u3[:k], u3[k:]
    beta = project_unit(raw_beta, psi.projection_style).reshape(psi.head_shape)
    eta_hat = project_unit(raw_eta, psi.projection_style).reshape(psi.head_shape)
    cache = _PsiCache(d_col, u1, h1, u2, h2, raw_beta, raw_eta)
    return beta, eta_hat, cache


def psi_forward(psi: EtaModel, d: GradFeatures) -> EtaOutputs:
    """Scale factor and candidate step for one gradient's statistics.

    In bypass mode the outputs are pinned to beta = 1 (so the composed
    step stays at its initial value forever) and eta_hat = 0.5.
    """
    if psi.bypass:
        return EtaOutputs(
            beta=np.ones(psi.head_shape), eta_hat=np.full(psi.head_shape, 0.5)
        )
    beta, eta_hat, _ = _psi_forward_cached(psi, d.as_column())
    return EtaOutputs(beta=beta, eta_hat=eta_hat)


@dataclass
class MetaStep:
    """Everything one meta-gradient evaluation produces."""

    psi_grads: tuple[Matrix, Matrix, Matrix]
    beta: Matrix
    eta_hat: Matrix
    step_candidate: Matrix
    w_prime: dict[int, Matrix]
    meta_loss: float


def meta_gradients(
    psi: EtaModel,
    d: GradFeatures,
    block,
    weights,
    grads,
    eta0: Matrix,
    meta_batch,
    net: NetworkModel,
    arm: str = ARM_FULL,
) -> MetaStep:
    """Gradients of the held-aside loss with respect to the model's weights.

    The chain: the current outputs (beta, eta_hat) compose a candidate
    step; the candidate weights w' = w - step (*) g are substituted into
    the network; the loss on `meta_batch` is differentiated back through
    the substitution, the composition, the unit projection and the MLP.

    Args:
        block: layer indices the step size serves (weights/grads align).
        weights, grads: per-layer current weights and main-batch gradients.
        eta0: initial step values, shaped like the step size.
    """
    block = tuple(block)
    weights = list(weights)
    grads = list(grads)
    for w, g in zip(weights, grads):
        if w.shape != g.shape:
            raise ShapeError(f"weight {w.shape} and gradient {g.shape} shapes differ")

    if psi.bypass:
        outs = psi_forward(psi, d)
        value, _, _ = compose_step(arm, outs.beta, eta0, outs.eta_hat)
        w_prime = {
            l: w - expand(value, w.shape) * g for l, w, g in zip(block, weights, grads)
        }
        zero = tuple(np.zeros_like(m) for m in psi.weights)
        loss = batch_loss(net.with_layers(w_prime), meta_batch)
        return MetaStep(zero, outs.beta, outs.eta_hat, value, w_prime, loss)

    d_col = d.as_column()
    beta, eta_hat, cache = _psi_forward_cached(psi, d_col)
    step_cand, dstep_dbeta, dstep_deta = compose_step(arm, beta, eta0, eta_hat)

    w_prime = {
        l: w - expand(step_cand, w.shape) * g for l, w, g in zip(block, weights, grads)
    }
    meta_loss, dW = block_loss_and_gradients(net.with_layers(w_prime), meta_batch, block)

    dstep = np.zeros(psi.head_shape)
    for l, g in zip(block, grads):
        dstep += reduce_to_kind(-dW[l] * g, psi.kind)

    k = psi.entry_count
    dbeta = (dstep * dstep_dbeta).reshape(k, 1)
    deta = (dstep * dstep_deta).reshape(k, 1)
    d_raw_beta = dbeta * project_unit_derivative(cache.raw_beta, psi.projection_style)
    d_raw_eta = deta * project_unit_derivative(cache.raw_eta, psi.projection_style)
    du3 = np.vstack([d_raw_beta, d_raw_eta])

    dw3 = du3 @ cache.h2.T
    dh2 = psi.w3.T @ du3
    _, a2 = leaky_relu(cache.u2, psi.activation_slope)
    du2 = dh2 * a2
    dw2 = du2 @ cache.h1.T
    dh1 = psi.w2.T @ du2
    _, a1 = leaky_relu(cache.u1, psi.activation_slope)
    du1 = dh1 * a1
    dw1 = du1 @ d_col.T

    return MetaStep((dw1, dw2, dw3), beta, eta_hat, step_cand, w_prime, meta_loss)


def psi_step(psi: EtaModel, grads) -> EtaModel:
    """One plain gradient-descent step on the model's three matrices.

    The weight arrays are updated in place (the model belongs to exactly
    one training loop); the returned object is the updated model.
    """
    g1, g2, g3 = grads
    for got, want in ((g1, psi.w1), (g2, psi.w2), (g3, psi.w3)):
        if got.shape != want.shape:
            raise ShapeError(f"gradient shape {got.shape} does not match weight {want.shape}")
    lr = psi.meta_learning_rate
    for w, g in ((psi.w1, g1), (psi.w2, g2), (psi.w3, g3)):
        w -= lr * g
    return psi
