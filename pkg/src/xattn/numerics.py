"""Dense float64 kernels and a central-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from scipy.special import expit


class NumericError(ArithmeticError):
    """Raised when a function under evaluation returns a non-finite value."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def softmax(scores, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    """Numerically stable (masked) softmax along ``axis``.

    Masked positions (``mask == False``) get exactly zero weight. Works on
    batches: every slice along ``axis`` must keep at least one position.
    """
    s = _as_f64(scores)
    if s.size == 0 or s.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if mask is None:
        m = s.max(axis=axis, keepdims=True)
        z = np.exp(s - m)
        return z / z.sum(axis=axis, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape:
        raise ValueError(f"mask shape {mask.shape} != scores shape {s.shape}")
    if not mask.any(axis=axis).all():
        raise ValueError("softmax with every position masked")
    filled = np.where(mask, s, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    z = np.where(mask, np.exp(filled - m), 0.0)
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax: returns dL/ds given p and dL/dp."""
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def matmul(a, b) -> np.ndarray:
    a, b = _as_f64(a), _as_f64(b)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def affine(W, x, b) -> np.ndarray:
    """``W @ x + b`` for a single vector or row-stacked ``x`` (``x @ W.T + b``)."""
    W, x, b = _as_f64(W), _as_f64(x), _as_f64(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine shape mismatch: W{W.shape} x{x.shape} b{b.shape}")
    return x @ W.T + b


def sigmoid(x) -> np.ndarray:
    """Logistic function; ``scipy.special.expit`` never overflows."""
    return expit(_as_f64(x))


def tanh(x) -> np.ndarray:
    return np.tanh(_as_f64(x))


def relu(x) -> np.ndarray:
    return np.maximum(_as_f64(x), 0.0)


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    ``x`` may have any shape; the result has the same shape. ``x`` is not
    modified.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = _as_f64(x).copy()
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x0))
        flat[i] = orig - eps
        fm = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b) -> np.ndarray:
    """Elementwise ``|a-b| / max(1, |a|, |b|)``."""
    a, b = _as_f64(a), _as_f64(b)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
