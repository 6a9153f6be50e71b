"""Empirical neural tangent kernel and linearized training dynamics.

Rows of the Jacobian (and of the kernel) are ordered sample-major: row
``i * k + c`` is output ``c`` of sample ``i``. Columns are the surviving
prunable weights in the parameter set's flat order; biases are held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import ModelSpec, ParamSet, forward, softmax_cross_entropy, squared_error

DEFAULT_BUDGET = 4000


class NTKBudgetError(ValueError):
    pass


class UnstableStepError(ValueError):
    pass


@dataclass
class NTKMatrix:
    matrix: np.ndarray
    n: int
    k: int
    ordering: str = "sample-major"


@dataclass
class EigenSystem:
    values: np.ndarray  # descending
    vectors: np.ndarray  # columns are eigenvectors

    @property
    def lambda_max(self) -> float:
        return float(self.values[0])


def _active_columns(params: ParamSet, mask) -> np.ndarray:
    if mask is None:
        return np.ones(params.d, dtype=bool)
    return params.flatten(mask.tensors) != 0


def jacobian(spec: ModelSpec, params: ParamSet, mask, x) -> np.ndarray:
    """(n*k, d_active) Jacobian of the (masked) network outputs."""
    x = np.asarray(x, dtype=np.float64)
    active = _active_columns(params, mask)
    k = spec.num_classes
    out = np.empty((len(x) * k, int(active.sum())))
    seed = np.zeros((1, k))
    for i in range(len(x)):
        tape = ad.Tape()
        inputs = [tape.leaf(t) if p else ad.constant(t) for t, p in zip(params.tensors, params.prunable)]
        leaves = [v for v in inputs if v.requires_grad]
        logits = forward(spec, inputs, x[i : i + 1], mask)
        for c in range(k):
            seed[:] = 0.0
            seed[0, c] = 1.0
            grads = ad.gradient(logits, leaves, grad_output=seed)
            out[i * k + c] = np.concatenate([g.ravel() for g in grads])[active]
    return out


def compute_ntk(spec: ModelSpec, params: ParamSet, mask, x, budget: int = DEFAULT_BUDGET) -> NTKMatrix:
    """``J J^T`` over the surviving weights."""
    n, k = len(x), spec.num_classes
    if n * k > budget:
        raise NTKBudgetError(
            f"kernel would be {n * k}x{n * k} (n={n}, k={k}); the dense budget is {budget}. "
            "Subsample the inputs (e.g. fewer examples per class)."
        )
    j = jacobian(spec, params, mask, x)
    theta = j @ j.T
    return NTKMatrix(0.5 * (theta + theta.T), n, k)


def eigen(ntk) -> EigenSystem:
    m = ntk.matrix if isinstance(ntk, NTKMatrix) else np.asarray(ntk, dtype=np.float64)
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    return EigenSystem(vals[order], vecs[:, order])


def linearized_error_curve(eig: EigenSystem, targets, lr: float, steps: int, initial_output=None) -> np.ndarray:
    """Predicted ``||Y - f_t||`` for t = 0..steps under a constant kernel and squared loss.

    With ``initial_output`` the residual ``Y - f_0`` replaces ``Y`` in the
    projections; leaving it out assumes the network starts at zero output.
    """
    y = np.asarray(targets, dtype=np.float64).ravel()
    if y.shape[0] != eig.vectors.shape[0]:
        raise ValueError(f"targets have {y.shape[0]} entries, kernel has {eig.vectors.shape[0]} rows")
    if lr * eig.lambda_max >= 2.0:
        raise UnstableStepError(
            f"lr={lr} with lambda_max={eig.lambda_max:.6g} violates lr * lambda_max < 2 "
            f"(use lr < {2.0 / eig.lambda_max:.6g})"
        )
    r0 = y if initial_output is None else y - np.asarray(initial_output, dtype=np.float64).ravel()
    proj2 = (eig.vectors.T @ r0) ** 2
    t = np.arange(steps + 1)[:, None]
    decay = (1.0 - lr * eig.values[None, :]) ** (2 * t)
    return np.sqrt(np.maximum(decay @ proj2, 0.0))


def output_gradient(spec: ModelSpec, params: ParamSet, mask, x, y, temperature: float = 1.0) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the raw logits, flattened sample-major."""
    tape = ad.Tape()
    inputs = [tape.leaf(t) if p else ad.constant(t) for t, p in zip(params.tensors, params.prunable)]
    logits = forward(spec, inputs, x, mask)
    loss = softmax_cross_entropy(logits, y, temperature)
    (gz,) = ad.gradient(loss, [logits])
    return gz.ravel()


def gradient_norm_decomposition(eig: EigenSystem, output_grad) -> np.ndarray:
    """Terms ``lambda_i * (u_i . dL/dZ)^2``; they sum to the squared parameter-gradient norm."""
    v = np.asarray(output_grad, dtype=np.float64).ravel()
    if v.shape[0] != eig.vectors.shape[0]:
        raise ValueError(f"output gradient has {v.shape[0]} entries, kernel has {eig.vectors.shape[0]} rows")
    return eig.values * (eig.vectors.T @ v) ** 2


def gd_residual_curve(spec: ModelSpec, params: ParamSet, x, targets, lr: float, steps: int) -> np.ndarray:
    """Actual ``||Y - f_t||`` under full-batch gradient descent on ``0.5 * ||f - Y||^2``.

    Only the prunable weights move, matching the kernel's parameterization.
    """
    tensors = [t.copy() for t in params.tensors]
    y = np.asarray(targets, dtype=np.float64).reshape(len(x), spec.num_classes)
    out = []
    for step in range(steps + 1):
        tape = ad.Tape()
        inputs = [tape.leaf(t) if p else ad.constant(t) for t, p in zip(tensors, params.prunable)]
        f = forward(spec, inputs, x)
        out.append(float(np.linalg.norm(y - f.value)))
        if step == steps:
            break
        leaves = [v for v in inputs if v.requires_grad]
        grads = iter(ad.gradient(squared_error(f, y), leaves))
        for t, p in zip(tensors, params.prunable):
            if p:
                t -= lr * next(grads)
    return np.array(out)


def network_outputs(spec: ModelSpec, params: ParamSet, x, mask=None) -> np.ndarray:
    with ad.no_record():
        return forward(spec, params, x, mask).value.ravel()
