"""The seed-fixed planted-outlier benchmark used by the comparisons.

A random block (weights from the package PRNG) receives Gaussian tokens.
Two LayerNorm channels get affine parameters chosen so that, on the
calibration tokens, their LN outputs span exactly ``center +- half_range``
(defaults reproduce the (-97, -58) / (4.5, 43.5) profile). Every other
channel keeps an ordinary gamma near 1.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .blocks import BlockGraph, random_block
from .data_io import SyntheticSpec, generate_synthetic, pick_outlier_channels
from .prng import Xoshiro256pp
from .tensor_core import layernorm

CANONICAL_SEED = 20240001


@dataclass(frozen=True)
class Benchmark:
    block: BlockGraph
    x_calib: np.ndarray
    outlier_channels: tuple
    seed: int


def plant_outliers(block: BlockGraph, x_calib: np.ndarray, channels, centers, half_range: float) -> BlockGraph:
    """Rewrite LN gamma/beta on ``channels`` so their calibration range is ``center +- half_range``."""
    norm = layernorm(x_calib, np.ones(block.width), np.zeros(block.width), block.eps)
    gamma, beta = block.gamma.copy(), block.beta.copy()
    for k, j in enumerate(channels):
        lo, hi = norm[:, j].min(), norm[:, j].max()
        g = 2.0 * half_range / (hi - lo)
        gamma[j] = g
        beta[j] = centers[k % len(centers)] - g * (hi + lo) / 2.0
    return replace(block, gamma=gamma, beta=beta)


def make_benchmark(
    seed: int = CANONICAL_SEED,
    kind: str = "linear_chain",
    width: int = 64,
    rows: int = 32,
    n_outliers: int = 2,
    centers=(-77.5, 24.0),
    half_range: float = 19.5,
    residual: bool = False,
) -> Benchmark:
    x = generate_synthetic(SyntheticSpec(rows=rows, cols=width, n_outlier_channels=0, seed=seed))
    rng = Xoshiro256pp(seed ^ 0x5DEECE66D)
    block = replace(random_block(kind, rng, width=width), residual=residual)
    chans = pick_outlier_channels(rng, width, n_outliers)
    block = plant_outliers(block, x, chans, centers, half_range)
    return Benchmark(block, x, tuple(chans), seed)
