"""Channel-wise shifting/scaling and its equivalent migration into neighbours.

The transformed activation is ``(x - z) / s`` per channel. Its inverse is
absorbed by the next linear layer (``W * s``, ``z @ W.T + b``), by the
LayerNorm affine parameters that produce it, or by a multiply-add on a
residual shortcut.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import DimensionError, as_vector, channel_stats, matmul


@dataclass(frozen=True)
class TransformVectors:
    z: np.ndarray
    s: np.ndarray
    t: float = float("inf")

    def __post_init__(self):
        z = as_vector(self.z, name="z")
        s = as_vector(self.s, z.shape[0], "s")
        if np.any(s <= 0):
            raise ValueError("scaling vector must be strictly positive")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "s", s)

    @property
    def width(self) -> int:
        return self.z.shape[0]

    @classmethod
    def identity(cls, width: int) -> "TransformVectors":
        return cls(np.zeros(width), np.ones(width))

    def is_identity(self) -> bool:
        return bool(np.all(self.z == 0) and np.all(self.s == 1))

    def check(self, width: int, what: str = "input") -> None:
        if self.width != width:
            raise DimensionError(f"transform has width {self.width}, {what} has width {width}")


@dataclass(frozen=True)
class LinearLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise DimensionError(f"weight must be 2-D, got shape {W.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", as_vector(self.b, W.shape[0], "bias"))

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return matmul(x, self.W) + self.b


def compute_shift(x_calib: np.ndarray) -> np.ndarray:
    """Per-channel midpoint of the observed range."""
    lo, hi = channel_stats(x_calib)
    return (hi + lo) / 2.0


def compute_scale(x_calib: np.ndarray, z, t: float) -> np.ndarray:
    """Scale channels whose shifted peak exceeds ``t`` down to ``t``; others get 1.

    The peak is ``max |x - z|``, which equals the channel half-range for the
    midpoint shift and the channel absmax for ``z = 0``. Scales are nudged up
    by an ulp where rounding would otherwise push a value past ``t``.
    """
    if not t > 0:
        raise ValueError(f"outlier threshold must be positive, got {t}")
    z = as_vector(z, x_calib.shape[1], "z")
    peak = np.abs(x_calib - z).max(axis=0)
    s = np.maximum(1.0, peak / t)
    over = peak / s > t
    while np.any(over):
        s = np.where(over, np.nextafter(s, np.inf), s)
        over = peak / s > t
    return s


def shifted_peak(x_calib: np.ndarray, z) -> float:
    """Largest per-channel ``max |x - z|``; the threshold at which every ``s`` is 1."""
    return float(np.abs(x_calib - as_vector(z, x_calib.shape[1], "z")).max())


def apply_transform(x: np.ndarray, tv: TransformVectors) -> np.ndarray:
    tv.check(x.shape[1])
    return (x - tv.z) / tv.s


def residual_correction(x_transformed: np.ndarray, tv: TransformVectors) -> np.ndarray:
    tv.check(x_transformed.shape[1])
    return x_transformed * tv.s + tv.z


def migrate_linear(layer: LinearLayer, tv: TransformVectors) -> LinearLayer:
    tv.check(layer.in_features, "layer input")
    return LinearLayer(layer.W * tv.s, layer.W @ tv.z + layer.b)


def fuse_into_layernorm(gamma, beta, tv: TransformVectors) -> tuple[np.ndarray, np.ndarray]:
    gamma = as_vector(gamma, tv.width, "gamma")
    beta = as_vector(beta, tv.width, "beta")
    return gamma / tv.s, (beta - tv.z) / tv.s
