"""Suppression methods and baselines, evaluated on a block end to end.

Every method yields a transform (possibly the identity) and an activation
calibrator; the fused block is then calibrated and run with the same
quantization specs, so output changes are comparable across methods.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

from .blocks import (
    CONSUMERS,
    BlockGraph,
    QuantizedBlock,
    calibrate_block,
    forward_fp,
    forward_quant,
    fuse_block,
    ln_output,
)
from .config import RunConfig
from .quantizer import QuantSpec, calibrate_minmax, calibrate_omse, calibrate_percentile, quant_mse
from .search import ObjectiveResult, SearchConfig, default_grid, grid_search_threshold, output_change
from .transform import TransformVectors, compute_scale, compute_shift

METHODS = (
    "fixed_gamma",
    "minmax",
    "omse",
    "osplus",
    "osplus_noscale",
    "osplus_noshift",
    "osplus_sumloss",
    "percentile",
    "smoothquant_alpha",
)


class UnknownMethodError(ValueError):
    pass


@dataclass
class TensorRecord:
    name: str
    range_lo: float
    range_hi: float
    quant_mse: float


@dataclass
class MethodResult:
    method: str
    tv: TransformVectors
    qblock: QuantizedBlock
    output_change_mse: float
    activation: Optional[TensorRecord]
    weight: Optional[TensorRecord]
    search: Optional[ObjectiveResult] = None
    extra: dict = field(default_factory=dict)


def search_structure(block: BlockGraph, method: str) -> tuple[str, list]:
    layers = [block.layers[n] for n in CONSUMERS[block.kind]]
    if block.kind == "pre_ln_mha":
        return ("sum_linear" if method == "osplus_sumloss" else "attention"), layers
    return "single_linear", layers


def evaluate(block, x, tv, act_spec, wgt_spec, act_calibrator=calibrate_minmax):
    """Fuse, calibrate and run; returns (quantized block, output change vs. the FP block)."""
    fused = fuse_block(block, tv)
    qblock = calibrate_block(fused, x, act_spec, wgt_spec, act_calibrator)
    return qblock, output_change(forward_quant(qblock, x), forward_fp(block, x))


def _records(qblock: QuantizedBlock, x) -> tuple:
    block = qblock.block
    a = ln_output(block, x)
    act = wgt = None
    if qblock.act_spec is not None:
        p = qblock.act_params.get("ln_out")
        if p is None:
            obs = {}
            forward_quant(qblock, x, observe=obs)
            d = obs["ln_out"][1] - a
            mse = float(np.mean(d * d))
        else:
            mse = quant_mse(a, p, qblock.act_spec)
        act = TensorRecord("activation", float(a.min()), float(a.max()), mse)
    names = CONSUMERS[block.kind]
    W = np.concatenate([block.layers[n].W for n in names], axis=0)
    if qblock.wgt_spec is not None:
        errs = [
            quant_mse(block.layers[n].W, qblock.wgt_params[n], qblock.wgt_spec) * block.layers[n].W.size
            for n in names
        ]
        wgt = TensorRecord("weight", float(W.min()), float(W.max()), float(sum(errs) / W.size))
    return act, wgt


def _osplus(block, x, act_spec, wgt_spec, cfg: RunConfig, method: str):
    a = ln_output(block, x)
    z = np.zeros(block.width) if method == "osplus_noshift" else compute_shift(a)
    if method == "osplus_noscale":
        return TransformVectors(z, np.ones(block.width)), None, {}
    structure, layers = search_structure(block, method)
    scfg = SearchConfig(
        grid=default_grid(a, z, cfg.grid_points, cfg.grid_ratio),
        include_identity=cfg.include_identity,
        act_spec=act_spec,
        wgt_spec=wgt_spec,
        head_dim=block.head_dim,
        causal=block.causal,
    )
    res = grid_search_threshold(a, structure, layers, z, scfg)
    return TransformVectors(z, compute_scale(a, z, res.t), res.t), res, {"structure": structure}


def smoothquant_scale(a: np.ndarray, W: np.ndarray, alpha: float) -> np.ndarray:
    """``max|a_j|**alpha / max|W_:,j|**(1 - alpha)`` with magnitudes floored at 1e-5."""
    act_max = np.maximum(np.abs(a).max(axis=0), 1e-5)
    w_max = np.maximum(np.abs(W).max(axis=0), 1e-5)
    return act_max**alpha / w_max ** (1.0 - alpha)


def run_method(
    method: str,
    block: BlockGraph,
    x_calib: np.ndarray,
    act_spec: Optional[QuantSpec],
    wgt_spec: Optional[QuantSpec],
    cfg: Optional[RunConfig] = None,
) -> MethodResult:
    cfg = cfg or RunConfig()
    if method not in METHODS:
        raise UnknownMethodError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    width = block.width
    identity = TransformVectors.identity(width)
    search, extra = None, {}
    calibrator: Callable = calibrate_minmax

    if method == "minmax":
        tv = identity
    elif method == "fixed_gamma":
        g = np.abs(block.gamma)
        tv = TransformVectors(np.zeros(width), np.where(g > 0, g, 1.0))
    elif method.startswith("osplus"):
        tv, search, extra = _osplus(block, x_calib, act_spec, wgt_spec, cfg, method)
    elif method == "smoothquant_alpha":
        a = ln_output(block, x_calib)
        W = np.concatenate([block.layers[n].W for n in CONSUMERS[block.kind]], axis=0)
        best = None
        for alpha in cfg.float_list("sq_alphas"):
            cand = TransformVectors(np.zeros(width), smoothquant_scale(a, W, alpha))
            _, err = evaluate(block, x_calib, cand, act_spec, wgt_spec)
            extra[f"alpha_{alpha:g}"] = err
            if best is None or err < best[0]:
                best = (err, alpha, cand)
        tv = best[2]
        extra["alpha"] = best[1]
    elif method == "percentile":
        tv = identity
        best = None
        for q in cfg.float_list("percentile_candidates"):
            cal = partial(calibrate_percentile, q=q)
            _, err = evaluate(block, x_calib, tv, act_spec, wgt_spec, cal)
            extra[f"q_{q:g}"] = err
            if best is None or err < best[0]:
                best = (err, q, cal)
        calibrator = best[2]
        extra["q"] = best[1]
    else:  # omse
        tv = identity
        calibrator = partial(calibrate_omse, grid_points=cfg.omse_grid_points)

    qblock, err = evaluate(block, x_calib, tv, act_spec, wgt_spec, calibrator)
    act, wgt = _records(qblock, x_calib)
    return MethodResult(method, tv, qblock, err, act, wgt, search, extra)
