"""Trainable step sizes: kinds, gradient features, projections, updates.

A step size is a small matrix of values in the open interval (0,1) that
multiplies a layer gradient through broadcasting.  Four kinds are
shipped: one value for the whole layer (scalar), one per entry
(element), one per output row (row) and one per input column (column).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .numerics import Matrix, expand

# Projections are clipped to this open interval so saturation can never
# emit exactly 0.0 or 1.0 in float64.
OPEN_EPS = 1e-12

TANH = "tanh"
SIGMOID = "sigmoid"
PROJECTION_STYLES = (TANH, SIGMOID)


class StepSizeKind(enum.Enum):
    SCALAR = "scalar"
    ELEMENT = "element"
    ROW = "row"
    COLUMN = "column"

    def shape_for(self, layer_shape: tuple[int, int]) -> tuple[int, int]:
        m, n = layer_shape
        return {
            StepSizeKind.SCALAR: (1, 1),
            StepSizeKind.ELEMENT: (m, n),
            StepSizeKind.ROW: (m, 1),
            StepSizeKind.COLUMN: (1, n),
        }[self]

    def entry_count(self, layer_shape: tuple[int, int]) -> int:
        s = self.shape_for(layer_shape)
        return s[0] * s[1]


@dataclass(frozen=True)
class StepSize:
    """Current and initial step values for one block, shaped per kind."""

    kind: StepSizeKind
    values: Matrix
    init_values: Matrix

    def __post_init__(self):
        if self.values.shape != self.init_values.shape:
            raise ShapeError(
                f"values {self.values.shape} and init_values {self.init_values.shape} differ"
            )
        for name, v in (("values", self.values), ("init_values", self.init_values)):
            if (v <= 0.0).any() or (v >= 1.0).any():
                raise ValueError(f"step {name} must lie strictly in (0,1)")

    @staticmethod
    def initial(kind: StepSizeKind, layer_shape: tuple[int, int], eta0: float) -> "StepSize":
        if not 0.0 < eta0 < 1.0:
            raise ValueError(f"initial step must be in (0,1), got {eta0}")
        v = np.full(kind.shape_for(layer_shape), eta0)
        return StepSize(kind=kind, values=v, init_values=v.copy())

    def with_values(self, values: Matrix) -> "StepSize":
        return replace(self, values=values)


@dataclass(frozen=True)
class GradFeatures:
    """Five summary statistics of a gradient, fed to the step-size model."""

    mean: float
    variance: float
    max: float
    min: float
    norm: float

    def as_column(self) -> Matrix:
        return np.array(
            [[self.mean], [self.variance], [self.max], [self.min], [self.norm]]
        )


def grad_features(g: Matrix) -> GradFeatures:
    """Mean, population variance, max, min and Frobenius norm of `g`."""
    if g.size == 0:
        raise ShapeError("gradient must be non-empty")
    flat = g.ravel()
    return GradFeatures(
        mean=float(flat.mean()),
        variance=float(flat.var()),
        max=float(flat.max()),
        min=float(flat.min()),
        norm=float(np.sqrt(np.sum(flat * flat))),
    )


def project_unit(u: Matrix, style: str) -> Matrix:
    """Squash raw values into the open interval (0,1).

    tanh style: 0.5 * (tanh(u) + 1); sigmoid style: 1 / (1 + exp(-u)).
    Outputs are clipped away from the endpoints by OPEN_EPS.
    """
    if style == TANH:
        out = 0.5 * (np.tanh(u) + 1.0)
    elif style == SIGMOID:
        # exp on the negative side only, so large |u| cannot overflow
        out = np.where(u >= 0, 1.0 / (1.0 + np.exp(-np.abs(u))),
                       np.exp(-np.abs(u)) / (1.0 + np.exp(-np.abs(u))))
    else:
        raise ValueError(f"projection style must be one of {PROJECTION_STYLES}, got {style!r}")
    return np.clip(out, OPEN_EPS, 1.0 - OPEN_EPS)


def project_unit_derivative(u: Matrix, style: str) -> Matrix:
    """Analytic derivative of project_unit (ignoring the endpoint clip)."""
    if style == TANH:
        t = np.tanh(u)
        return 0.5 * (1.0 - t * t)
    if style == SIGMOID:
        p = project_unit(u, SIGMOID)
        return p * (1.0 - p)
    raise ValueError(f"projection style must be one of {PROJECTION_STYLES}, got {style!r}")


def _conforming(shape, target) -> bool:
    m, n = target
    return tuple(shape) in ((1, 1), (m, n), (m, 1), (1, n))


def step_update(beta: Matrix, eta0: Matrix, eta_hat: Matrix) -> Matrix:
    """Convex combination beta * eta0 + (1 - beta) * eta_hat.

    Hadamard product with scalar (1,1) broadcasting.  With beta and
    eta_hat in [0,1] and eta0 in (0,1) the result stays inside the
    elementwise interval spanned by eta0 and eta_hat.
    """
    try:
        target = np.broadcast_shapes(beta.shape, eta0.shape, eta_hat.shape)
    except ValueError:
        raise ShapeError(
            f"step_update shapes do not conform: beta {beta.shape}, "
            f"eta0 {eta0.shape}, eta_hat {eta_hat.shape}"
        ) from None
    for name, a in (("beta", beta), ("eta0", eta0), ("eta_hat", eta_hat)):
        if not _conforming(a.shape, target):
            raise ShapeError(f"{name} shape {a.shape} does not conform to {target}")
    for name, a in (("beta", beta), ("eta_hat", eta_hat)):
        if (a < 0.0).any() or (a > 1.0).any():
            raise ValueError(f"{name} entries must lie in [0,1]")
    return beta * eta0 + (1.0 - beta) * eta_hat


def reduce_to_kind(full_grad: Matrix, kind: StepSizeKind) -> Matrix:
    """Adjoint of broadcasting: sum over every axis the kind broadcasts along.

    Guarantees <expand(s, shape), G> == <s, reduce_to_kind(G, kind)> for
    any step s of the kind's shape.
    """
    if kind is StepSizeKind.SCALAR:
        return np.array([[full_grad.sum()]])
    if kind is StepSizeKind.ROW:
        return full_grad.sum(axis=1, keepdims=True)
    if kind is StepSizeKind.COLUMN:
        return full_grad.sum(axis=0, keepdims=True)
    return full_grad.copy()


# Ablation arms: which parts of the convex combination drive the step.
ARM_FULL = "full"
ARM_BASELINE = "baseline"
ARM_LEFT = "left_only"
ARM_RIGHT = "right_only"
ABLATION_ARMS = (ARM_FULL, ARM_BASELINE, ARM_LEFT, ARM_RIGHT)


def compose_step(arm: str, beta: Matrix, eta0: Matrix, eta_hat: Matrix):
    """Step composition for one ablation arm.

    Returns (value, d_value/d_beta, d_value/d_eta_hat); the derivatives
    give the meta-gradient chain the same shape as `value`.
    """
    shape = np.broadcast_shapes(beta.shape, eta0.shape, eta_hat.shape)
    if arm == ARM_FULL:
        return step_update(beta, eta0, eta_hat), eta0 - eta_hat, 1.0 - beta
    if arm == ARM_BASELINE:
        zeros = np.zeros(shape)
        return expand(eta0, shape) if eta0.shape != shape else eta0.copy(), zeros, zeros.copy()
    if arm == ARM_LEFT:
        return beta * eta0, np.broadcast_to(eta0, shape).copy(), np.zeros(shape)
    if arm == ARM_RIGHT:
        return (1.0 - beta) * eta_hat, -np.broadcast_to(eta_hat, shape).copy(), 1.0 - beta
    raise ValueError(f"ablation arm must be one of {ABLATION_ARMS}, got {arm!r}")
