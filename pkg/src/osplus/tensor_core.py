"""Dense float64 matrix helpers shared by every other module.

Matrices are plain 2-D ``numpy`` arrays of dtype float64. The functions here
validate shapes and finiteness and otherwise stay out of the way.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array (vectors become a single row)."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def as_vector(v, length: int | None = None, name: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if length is not None and a.shape[0] != length:
        raise DimensionError(f"{name} has length {a.shape[0]}, expected {length}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b_transposed: np.ndarray) -> np.ndarray:
    """Return ``a @ b_transposed.T``; both operands share the inner (column) axis."""
    if a.shape[1] != b_transposed.shape[1]:
        raise DimensionError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by transpose of "
            f"{b_transposed.shape[0]}x{b_transposed.shape[1]}"
        )
    return a @ b_transposed.T


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column (min, max) over all rows."""
    if x.size == 0 or x.shape[0] == 0:
        raise EmptyInputError("channel_stats needs at least one row")
    return x.min(axis=0), x.max(axis=0)


def softmax_rows(x: np.ndarray, scale: float = 1.0, causal_mask: bool = False) -> np.ndarray:
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    logits = x * scale
    if causal_mask:
        if x.shape[0] != x.shape[1]:
            raise DimensionError(f"causal mask needs a square matrix, got {x.shape}")
        logits = np.where(np.tri(*x.shape, dtype=bool), logits, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def layernorm(x: np.ndarray, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    """Row-wise standardization with population variance, then ``* gamma + beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    gamma = as_vector(gamma, x.shape[1], "gamma")
    beta = as_vector(beta, x.shape[1], "beta")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))
