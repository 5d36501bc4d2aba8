"""Output-change objectives and the outlier-threshold grid search.

Both objectives compare a migrated-and-quantized computation against the
floating-point original, averaging the squared row norm of the difference
over calibration tokens. Quantizer parameters are MinMax-recalibrated on
the transformed tensors for every candidate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .quantizer import QuantSpec, activation_spec, quantize, weight_spec
from .tensor_core import DimensionError, matmul, softmax_rows
from .transform import (
    LinearLayer,
    TransformVectors,
    apply_transform,
    compute_scale,
    migrate_linear,
    shifted_peak,
)

STRUCTURES = ("single_linear", "attention", "sum_linear")


class SearchError(ValueError):
    pass


def output_change(out: np.ndarray, ref: np.ndarray) -> float:
    """Mean over rows of the squared Frobenius norm of ``out - ref``."""
    d = out - ref
    return float(np.sum(d * d) / d.shape[0])


@dataclass(frozen=True)
class SearchConfig:
    grid: tuple = ()
    include_identity: bool = True
    act_spec: Optional[QuantSpec] = field(default_factory=lambda: activation_spec(8))
    wgt_spec: Optional[QuantSpec] = field(default_factory=lambda: weight_spec(8))
    head_dim: int = 0
    causal: bool = False

    def __post_init__(self):
        grid = tuple(float(t) for t in self.grid)
        if any(not t > 0 for t in grid):
            raise SearchError("grid thresholds must be positive")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise SearchError("grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class ObjectiveResult:
    t: float
    objective: float
    per_candidate_trace: tuple
    s: Optional[np.ndarray] = None


def default_grid(x_calib: np.ndarray, z, n: int = 32, ratio: float = 50.0) -> tuple:
    """``n`` log-spaced thresholds from ``peak / ratio`` up to the shifted peak."""
    peak = shifted_peak(x_calib, z)
    if peak == 0:
        return (1.0,)
    return tuple(np.geomspace(peak / ratio, peak, n))


def _quantized_linear(xt_q: np.ndarray, layer: LinearLayer, tv, wgt_spec) -> np.ndarray:
    m = migrate_linear(layer, tv)
    return matmul(xt_q, quantize(m.W, wgt_spec)) + m.b


def objective_linear(x_calib, layer: LinearLayer, tv: TransformVectors, act_spec, wgt_spec) -> float:
    xt_q = quantize(apply_transform(x_calib, tv), act_spec)
    return output_change(_quantized_linear(xt_q, layer, tv, wgt_spec), layer(x_calib))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, head_dim: int, causal: bool = False) -> np.ndarray:
    """Multi-head scaled dot-product attention on already-projected q/k/v."""
    width = q.shape[1]
    if head_dim < 1 or width % head_dim:
        raise DimensionError(f"projection width {width} is not divisible by head_dim {head_dim}")
    scale = 1.0 / np.sqrt(head_dim)
    heads = []
    for h in range(0, width, head_dim):
        sl = slice(h, h + head_dim)
        probs = softmax_rows(matmul(q[:, sl], k[:, sl]), scale, causal)
        heads.append(probs @ v[:, sl])
    return np.concatenate(heads, axis=1)


def objective_attention(
    x_calib, q_layer, k_layer, v_layer, tv, act_spec, wgt_spec, head_dim: int, causal: bool = False
) -> float:
    layers = (q_layer, k_layer, v_layer)
    if len({l.in_features for l in layers}) != 1 or layers[0].in_features != x_calib.shape[1]:
        raise DimensionError("q/k/v layers must share the activation width")
    ref = attention(*(l(x_calib) for l in layers), head_dim, causal)
    xt_q = quantize(apply_transform(x_calib, tv), act_spec)
    out = attention(*(_quantized_linear(xt_q, l, tv, wgt_spec) for l in layers), head_dim, causal)
    return output_change(out, ref)


def objective_sum_linear(x_calib, layers: Sequence[LinearLayer], tv, act_spec, wgt_spec) -> float:
    """Ablation objective: per-layer output changes added together."""
    return sum(objective_linear(x_calib, l, tv, act_spec, wgt_spec) for l in layers)


def evaluate_objective(x_calib, structure: str, layers, tv, config: SearchConfig) -> float:
    if structure == "single_linear":
        (layer,) = layers if isinstance(layers, (tuple, list)) else (layers,)
        return objective_linear(x_calib, layer, tv, config.act_spec, config.wgt_spec)
    if structure == "attention":
        return objective_attention(
            x_calib, *layers, tv, config.act_spec, config.wgt_spec, config.head_dim, config.causal
        )
    if structure == "sum_linear":
        return objective_sum_linear(x_calib, layers, tv, config.act_spec, config.wgt_spec)
    raise SearchError(f"unknown structure {structure!r}; expected one of {STRUCTURES}")


def grid_search_threshold(x_calib, structure: str, layers, z, config: SearchConfig) -> ObjectiveResult:
    """Evaluate every candidate threshold and keep the best; ties go to the smaller ``t``."""
    candidates = set(config.grid)
    if config.include_identity:
        candidates.add(shifted_peak(x_calib, z) or 1.0)
    if not candidates:
        raise SearchError("empty threshold grid")

    trace = []
    best_t, best_obj, best_s = None, np.inf, None
    for t in sorted(candidates):
        s = compute_scale(x_calib, z, t)
        obj = evaluate_objective(x_calib, structure, layers, TransformVectors(z, s, t), config)
        trace.append((t, obj))
        if obj < best_obj:
            best_t, best_obj, best_s = t, obj, s
    if best_t is None:
        raise SearchError("every candidate produced a non-finite objective")
    return ObjectiveResult(best_t, best_obj, tuple(trace), best_s)
