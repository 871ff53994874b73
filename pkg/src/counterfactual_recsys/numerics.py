"""Array primitives shared by the models, trainers and tests.

Every parameter is a 2-D float64 array (biases are `(n, 1)` columns) so the optimizers can treat rows uniformly.
"""

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import numpy.typing as npt

from counterfactual_recsys.error import ConfigurationError, GradientOracleError

__all__ = [
    "DenseMatrix",
    "FloatArray",
    "IntArray",
    "AdamState",
    "sigmoid",
    "logistic_loss",
    "logistic_loss_grad",
    "adam_step",
    "sparse_adam_step",
    "finite_diff_grad",
    "max_relative_error",
]

DenseMatrix = npt.NDArray[np.float64]
FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

ArrayLike = Union[float, FloatArray]

_SIGMOID_LOW = float(np.finfo(np.float64).tiny)
_SIGMOID_HIGH = float(np.nextafter(1.0, 0.0))


def sigmoid(x: ArrayLike) -> ArrayLike:
    """1 / (1 + e^-x), evaluated without overflow and kept strictly inside (0, 1)."""
    arr = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = np.clip(out, _SIGMOID_LOW, _SIGMOID_HIGH)
    return float(out) if out.ndim == 0 else out


def logistic_loss(y: ArrayLike, s: ArrayLike) -> ArrayLike:
    """ln(1 + e^(-y*s)) for labels y in {-1, +1}."""
    out = np.logaddexp(0.0, -np.asarray(y, dtype=np.float64) * np.asarray(s, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def logistic_loss_grad(y: ArrayLike, s: ArrayLike) -> ArrayLike:
    """Derivative of `logistic_loss` with respect to the score."""
    y_arr = np.asarray(y, dtype=np.float64)
    out = -y_arr * np.asarray(sigmoid(-y_arr * np.asarray(s, dtype=np.float64)))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class AdamState:
    """Moment buffers for one parameter.

    `row_steps` holds one step counter per row: dense steps advance every row, sparse steps only the rows they
    touch. `t` counts calls regardless of which rows were updated.
    """

    m: DenseMatrix
    v: DenseMatrix
    row_steps: IntArray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros_like(param: DenseMatrix, *, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if param.ndim != 2:
            msg = f"parameters must be 2-D, got shape {param.shape}"
            raise ConfigurationError(msg)
        return AdamState(
            m=np.zeros_like(param, dtype=np.float64),
            v=np.zeros_like(param, dtype=np.float64),
            row_steps=np.zeros(param.shape[0], dtype=np.int64),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def _adam_kernel(param: DenseMatrix, rows: IntArray, grads: DenseMatrix, state: AdamState, lr: float) -> None:
    state.row_steps[rows] += 1
    steps = state.row_steps[rows].astype(np.float64)[:, None]
    m = state.beta1 * state.m[rows] + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v[rows] + (1.0 - state.beta2) * np.square(grads)
    state.m[rows] = m
    state.v[rows] = v
    m_hat = m / (1.0 - np.power(state.beta1, steps))
    v_hat = v / (1.0 - np.power(state.beta2, steps))
    param[rows] = param[rows] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.t += 1


def adam_step(param: DenseMatrix, grad: DenseMatrix, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every row of `param`, in place."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        msg = f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        raise ConfigurationError(msg)
    if lr < 0:
        msg = f"learning rate must be non-negative, got {lr}"
        raise ConfigurationError(msg)
    _adam_kernel(param, np.arange(param.shape[0], dtype=np.int64), grad, state, lr)


def sparse_adam_step(
    param: DenseMatrix,
    row_grads: Union[Mapping[int, npt.ArrayLike], tuple[IntArray, DenseMatrix]],
    state: AdamState,
    lr: float,
) -> None:
    """Lazy Adam: only the listed rows (and their moment buffers and step counters) change.

    `row_grads` is either a mapping row -> gradient vector or a `(rows, grads)` pair with unique rows.
    """
    if isinstance(row_grads, tuple):
        rows, grads = row_grads
        rows = np.asarray(rows, dtype=np.int64)
        grads = np.asarray(grads, dtype=np.float64)
    else:
        if not row_grads:
            return
        rows = np.fromiter(sorted(row_grads), dtype=np.int64, count=len(row_grads))
        grads = np.stack([np.asarray(row_grads[int(r)], dtype=np.float64).reshape(-1) for r in rows])
    if rows.size == 0:
        return
    if rows.min() < 0 or rows.max() >= param.shape[0]:
        msg = f"row index out of range for parameter with {param.shape[0]} rows"
        raise ConfigurationError(msg)
    if grads.shape != (rows.size, param.shape[1]):
        msg = f"shape mismatch: {rows.size} rows of width {param.shape[1]} expected, got {grads.shape}"
        raise ConfigurationError(msg)
    if np.unique(rows).size != rows.size:
        msg = "sparse gradient rows must be unique"
        raise ConfigurationError(msg)
    _adam_kernel(param, rows, grads, state, lr)


def finite_diff_grad(f: Callable[[FloatArray], float], at: npt.ArrayLike, h: float = 1e-5) -> FloatArray:
    """Central-difference gradient of a scalar function of a vector."""
    if h <= 0:
        msg = f"step size must be positive, got {h}"
        raise ConfigurationError(msg)
    x = np.array(at, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for i in range(x.size):
        original = x[i]
        x[i] = original + h
        upper = f(x)
        x[i] = original - h
        lower = f(x)
        x[i] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            msg = "non-finite function value in finite-difference oracle"
            raise GradientOracleError(msg, i)
        grad[i] = (upper - lower) / (2.0 * h)
    return grad


def max_relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor); `floor` keeps near-zero components from dominating."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))
