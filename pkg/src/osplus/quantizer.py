"""Uniform affine fake quantization and baseline range calibrators.

Quantization parameters are held per *slice*. The slice layout is a small
2-D grid that broadcasts against the quantized matrix:

* ``per_tensor``  -> (1, 1)
* ``per_channel`` -> (rows, 1) for ``axis=0`` or (1, cols) for ``axis=1``
* ``per_token``   -> (rows, 1)
* ``per_group``   -> (rows, ceil(cols / group_size)); the last group may be short

A ``None`` spec stands for "no quantization" wherever a spec is accepted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

GRANULARITIES = ("per_tensor", "per_channel", "per_token", "per_group")
SUPPORTED_BITS = (4, 6, 8)


class QuantConfigError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    granularity: str = "per_tensor"
    symmetric: bool = False
    axis: int = 0
    group_size: int = 0

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise QuantConfigError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise QuantConfigError(f"unknown granularity {self.granularity!r}")
        if self.axis not in (0, 1):
            raise QuantConfigError("axis must be 0 or 1")
        if self.granularity == "per_group" and self.group_size < 1:
            raise QuantConfigError("per_group needs group_size >= 1")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) + 1 if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    @classmethod
    def parse(cls, text: str, bits: int, symmetric: bool) -> "QuantSpec":
        """Build from CLI shorthand: ``tensor``, ``channel``, ``token`` or ``group:N``."""
        text = text.strip()
        if text.startswith("group:"):
            try:
                size = int(text.split(":", 1)[1])
            except ValueError:
                raise QuantConfigError(f"bad group size in {text!r}") from None
            return cls(bits, "per_group", symmetric, group_size=size)
        name = text if text.startswith("per_") else "per_" + text
        if name == "per_group":
            raise QuantConfigError("per_group needs a size, e.g. group:16")
        return cls(bits, name, symmetric)

    def describe(self) -> str:
        g = self.granularity
        if g == "per_group":
            g = f"per_group:{self.group_size}"
        elif g == "per_channel":
            g = f"per_channel:axis{self.axis}"
        return f"int{self.bits}/{g}/{'sym' if self.symmetric else 'asym'}"


def activation_spec(bits: int = 8, granularity: str = "tensor") -> QuantSpec:
    return QuantSpec.parse(granularity, bits, symmetric=False)


def weight_spec(bits: int = 8, granularity: str = "channel") -> QuantSpec:
    return QuantSpec.parse(granularity, bits, symmetric=True)


@dataclass(frozen=True)
class QuantParams:
    scale: np.ndarray
    zero_point: np.ndarray
    clip_lo: int
    clip_hi: int

    def expand(self, shape, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
        """Broadcast-ready scale and zero point for a matrix of ``shape``."""
        if self.scale.shape != slice_shape(shape, spec):
            raise QuantConfigError(
                f"params have slice grid {self.scale.shape}, "
                f"but {spec.describe()} on {shape} needs {slice_shape(shape, spec)}"
            )
        if spec.granularity == "per_group":
            cols = shape[1]
            return (
                np.repeat(self.scale, spec.group_size, axis=1)[:, :cols],
                np.repeat(self.zero_point, spec.group_size, axis=1)[:, :cols],
            )
        return self.scale, self.zero_point


def slice_shape(shape, spec: QuantSpec) -> tuple[int, int]:
    rows, cols = shape
    g = spec.granularity
    if g == "per_tensor":
        return (1, 1)
    if g == "per_token" or (g == "per_channel" and spec.axis == 0):
        return (rows, 1)
    if g == "per_channel":
        return (1, cols)
    return (rows, -(-cols // spec.group_size))


def _slice_view(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Reshape ``x`` to (*slice_grid, elements) with NaN padding for short groups."""
    rows, cols = x.shape
    g = spec.granularity
    if g == "per_tensor":
        return x.reshape(1, 1, -1)
    if g == "per_token" or (g == "per_channel" and spec.axis == 0):
        return x.reshape(rows, 1, cols)
    if g == "per_channel":
        return x.T.reshape(1, cols, rows)
    gs = spec.group_size
    ng = -(-cols // gs)
    padded = np.full((rows, ng * gs), np.nan)
    padded[:, :cols] = x
    return padded.reshape(rows, ng, gs)


def _slice_minmax(x: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    view = _slice_view(x, spec)
    return np.nanmin(view, axis=2), np.nanmax(view, axis=2)


def params_from_range(lo, hi, spec: QuantSpec) -> QuantParams:
    """Turn per-slice clipping ranges into scales and zero points.

    The range is widened to contain zero so the zero point always lands on the
    integer lattice. All-zero slices get scale 1.
    """
    lo = np.minimum(np.asarray(lo, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(hi, dtype=np.float64), 0.0)
    if spec.symmetric:
        absmax = np.maximum(-lo, hi)
        scale = absmax / spec.qmax
        zp = np.zeros(scale.shape, dtype=np.int64)
    else:
        scale = (hi - lo) / (spec.qmax - spec.qmin)
        safe = np.where(scale > 0, scale, 1.0)
        zp = np.clip(round_half_away(-lo / safe), spec.qmin, spec.qmax).astype(np.int64)
    scale = np.where(scale > 0, scale, 1.0)
    return QuantParams(scale, zp, spec.qmin, spec.qmax)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def fake_quant(x: np.ndarray, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    scale, zp = params.expand(x.shape, spec)
    with np.errstate(over="ignore"):  # subnormal scales overflow to inf, which the clamp absorbs
        q = np.clip(round_half_away(x / scale) + zp, params.clip_lo, params.clip_hi)
    return (q - zp) * scale


def quant_mse(x: np.ndarray, params: QuantParams, spec: QuantSpec) -> float:
    d = fake_quant(x, params, spec) - x
    return float(np.mean(d * d))


def calibrate_minmax(x: np.ndarray, spec: QuantSpec) -> QuantParams:
    lo, hi = _slice_minmax(x, spec)
    return params_from_range(lo, hi, spec)


def calibrate_percentile(x: np.ndarray, spec: QuantSpec, q: float = 0.9999) -> QuantParams:
    """Clip each slice to its ``[1-q, q]`` quantiles (linear interpolation)."""
    if not 0.5 < q <= 1.0:
        raise QuantConfigError(f"percentile q must lie in (0.5, 1], got {q}")
    if q == 1.0:
        return calibrate_minmax(x, spec)
    view = _slice_view(x, spec)
    lo = np.nanquantile(view, 1.0 - q, axis=2)
    hi = np.nanquantile(view, q, axis=2)
    return params_from_range(lo, hi, spec)


def calibrate_omse(x: np.ndarray, spec: QuantSpec, grid_points: int = 100) -> QuantParams:
    """Per slice, pick the fraction ``k / grid_points`` of the MinMax range with least MSE.

    Candidates are ordered from the full MinMax range downwards and the first
    minimum wins, so a shrunken range is only taken when its error is strictly
    smaller and the result never does worse than MinMax.
    """
    if grid_points < 2:
        raise QuantConfigError("grid_points must be >= 2")
    lo, hi = _slice_minmax(x, spec)
    view = _slice_view(x, spec)
    fracs = (np.arange(grid_points, 0, -1) / grid_points)[:, None, None]
    cand = params_from_range(lo * fracs, hi * fracs, spec)
    scale = cand.scale[..., None]
    zp = cand.zero_point[..., None]
    q = np.clip(round_half_away(view / scale) + zp, cand.clip_lo, cand.clip_hi)
    d = (q - zp) * scale - view
    best = np.argmin(np.nansum(d * d, axis=3), axis=0)[None]
    return QuantParams(
        np.take_along_axis(cand.scale, best, 0)[0],
        np.take_along_axis(cand.zero_point, best, 0)[0],
        cand.clip_lo,
        cand.clip_hi,
    )


def quantize(x: np.ndarray, spec: Optional[QuantSpec]) -> np.ndarray:
    """MinMax-calibrate on ``x`` and fake-quantize it; ``None`` passes ``x`` through."""
    if spec is None:
        return x
    return fake_quant(x, calibrate_minmax(x, spec), spec)
