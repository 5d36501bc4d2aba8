"""Transformer sub-blocks with floating-point and fake-quantized forwards.

Three wirings are supported:

``pre_ln_mha``   y = h + out(MHA(q(a), k(a), v(a))),   a = LN(h)
``post_ln_ffn``  y = r(a) + down(gelu(up(a))),         a = LN(h)
``linear_chain`` y = proj(a) [+ r(a) if residual],     a = LN(h)

``r`` is the residual shortcut: identity in a plain block, the channel-wise
multiply-add ``a * res_scale + res_shift`` once a transform has been fused.

Quantization nodes (fixed across all methods):
activations ``ln_out`` (also feeding the residual where one consumes it),
``v_out``, ``attn_probs``, ``attn_out`` for attention and ``ffn_hidden`` for
the FFN; every linear weight is quantized with the weight spec.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .quantizer import QuantParams, QuantSpec, calibrate_minmax, fake_quant
from .tensor_core import LN_EPS, DimensionError, as_vector, gelu, layernorm, matmul, softmax_rows
from .transform import LinearLayer, TransformVectors, fuse_into_layernorm, migrate_linear

KINDS = ("pre_ln_mha", "post_ln_ffn", "linear_chain")
LAYER_NAMES = {
    "pre_ln_mha": ("q", "k", "v", "out"),
    "post_ln_ffn": ("up", "down"),
    "linear_chain": ("proj",),
}
CONSUMERS = {"pre_ln_mha": ("q", "k", "v"), "post_ln_ffn": ("up",), "linear_chain": ("proj",)}
ACT_NODES = {
    "pre_ln_mha": ("ln_out", "v_out", "attn_probs", "attn_out"),
    "post_ln_ffn": ("ln_out", "ffn_hidden"),
    "linear_chain": ("ln_out",),
}
# per-tensor/per-channel activation params are fixed at calibration; finer ones are dynamic
STATIC_GRANULARITIES = ("per_tensor", "per_channel")


class BlockConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockGraph:
    kind: str
    gamma: np.ndarray
    beta: np.ndarray
    layers: dict
    eps: float = LN_EPS
    head_dim: int = 16
    residual: bool = True
    causal: bool = False
    res_scale: Optional[np.ndarray] = None
    res_shift: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BlockConfigError(f"unknown block kind {self.kind!r}; expected one of {KINDS}")
        missing = set(LAYER_NAMES[self.kind]) - set(self.layers)
        if missing:
            raise BlockConfigError(f"{self.kind} block is missing layers {sorted(missing)}")
        width = np.asarray(self.gamma).reshape(-1).shape[0]
        object.__setattr__(self, "gamma", as_vector(self.gamma, width, "gamma"))
        object.__setattr__(self, "beta", as_vector(self.beta, width, "beta"))
        for name in CONSUMERS[self.kind]:
            if self.layers[name].in_features != width:
                raise DimensionError(
                    f"layer {name} expects width {self.layers[name].in_features}, LN width is {width}"
                )
        if self.kind == "pre_ln_mha":
            q, k, v, out = (self.layers[n] for n in ("q", "k", "v", "out"))
            if q.out_features != k.out_features:
                raise DimensionError("q and k projections must have equal width")
            if q.out_features % self.head_dim or v.out_features % self.head_dim:
                raise DimensionError(f"projection widths are not divisible by head_dim {self.head_dim}")
            if out.in_features != v.out_features or out.out_features != width:
                raise DimensionError("out projection must map v width back to the block width")
        elif self.kind == "post_ln_ffn":
            up, down = self.layers["up"], self.layers["down"]
            if down.in_features != up.out_features or down.out_features != width:
                raise DimensionError("down projection must map the hidden width back to the block width")
        elif self.residual and self.layers["proj"].out_features != width:
            raise DimensionError("a residual linear_chain needs proj to preserve the width")
        if (self.res_scale is None) != (self.res_shift is None):
            raise BlockConfigError("res_scale and res_shift must be set together")
        if self.res_scale is not None:
            object.__setattr__(self, "res_scale", as_vector(self.res_scale, width, "res_scale"))
            object.__setattr__(self, "res_shift", as_vector(self.res_shift, width, "res_shift"))

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    @property
    def residual_consumes_ln(self) -> bool:
        """Whether the shortcut carries the LN output (Post-LN style) rather than the block input."""
        return self.residual and self.kind in ("post_ln_ffn", "linear_chain")

    def consumers(self) -> list:
        return [self.layers[n] for n in CONSUMERS[self.kind]]


ActHook = Callable[[str, np.ndarray], np.ndarray]
WgtHook = Callable[[str, np.ndarray], np.ndarray]


def _identity_hook(name, x):
    return x


def _run(block: BlockGraph, x: np.ndarray, act: ActHook = _identity_hook, wgt: WgtHook = _identity_hook):
    if x.ndim != 2 or x.shape[1] != block.width:
        raise DimensionError(f"input has shape {x.shape}, block width is {block.width}")

    def lin(name, inp):
        layer = block.layers[name]
        return matmul(inp, wgt(name, layer.W)) + layer.b

    a = act("ln_out", layernorm(x, block.gamma, block.beta, block.eps))
    if block.kind == "pre_ln_mha":
        q, k = lin("q", a), lin("k", a)
        v = act("v_out", lin("v", a))
        heads = []
        scale = 1.0 / np.sqrt(block.head_dim)
        for h in range(0, q.shape[1], block.head_dim):
            sl = slice(h, h + block.head_dim)
            probs = act("attn_probs", softmax_rows(matmul(q[:, sl], k[:, sl]), scale, block.causal))
            heads.append(probs @ v[:, sl])
        y = lin("out", act("attn_out", np.concatenate(heads, axis=1)))
        return y + x if block.residual else y

    if block.kind == "post_ln_ffn":
        y = lin("down", act("ffn_hidden", gelu(lin("up", a))))
    else:
        y = lin("proj", a)
    if block.residual:
        shortcut = a if block.res_scale is None else a * block.res_scale + block.res_shift
        y = y + shortcut
    return y


def forward_fp(block: BlockGraph, x: np.ndarray) -> np.ndarray:
    return _run(block, x)


def ln_output(block: BlockGraph, x: np.ndarray) -> np.ndarray:
    """The activation a transform acts on: the block's LayerNorm output."""
    return layernorm(x, block.gamma, block.beta, block.eps)


def fuse_block(block: BlockGraph, tv: TransformVectors) -> BlockGraph:
    """Fold ``tv`` into the LN parameters, consuming layers and the shortcut."""
    tv.check(block.width, "block")
    if tv.is_identity():
        return block
    gamma, beta = fuse_into_layernorm(block.gamma, block.beta, tv)
    layers = dict(block.layers)
    for name in CONSUMERS[block.kind]:
        layers[name] = migrate_linear(layers[name], tv)
    res_scale, res_shift = block.res_scale, block.res_shift
    if block.residual_consumes_ln:
        prev_s = np.ones(block.width) if res_scale is None else res_scale
        prev_z = np.zeros(block.width) if res_shift is None else res_shift
        res_scale, res_shift = tv.s * prev_s, tv.z * prev_s + prev_z
    return replace(block, gamma=gamma, beta=beta, layers=layers, res_scale=res_scale, res_shift=res_shift)


def count_ops(block: BlockGraph) -> dict:
    """Number of quantization nodes and extra channel-wise multiply-adds in a block."""
    nodes = len(ACT_NODES[block.kind]) + len(LAYER_NAMES[block.kind])
    return {"quant_nodes": nodes, "channel_affine": int(block.res_scale is not None and block.residual)}


@dataclass(frozen=True)
class QuantizedBlock:
    block: BlockGraph
    act_spec: Optional[QuantSpec]
    wgt_spec: Optional[QuantSpec]
    act_params: dict = field(default_factory=dict)
    wgt_params: dict = field(default_factory=dict)


def _is_static(spec: Optional[QuantSpec]) -> bool:
    return spec is not None and spec.granularity in STATIC_GRANULARITIES


def calibrate_block(
    block: BlockGraph,
    x_calib: np.ndarray,
    act_spec: Optional[QuantSpec],
    wgt_spec: Optional[QuantSpec],
    act_calibrator: Callable = calibrate_minmax,
    wgt_calibrator: Callable = calibrate_minmax,
) -> QuantizedBlock:
    """Fix quantizer parameters from a floating-point pass over ``x_calib``.

    Attention probabilities are pooled across heads into one node.
    """
    seen: dict = {}

    def record(name, t):
        seen.setdefault(name, []).append(t)
        return t

    _run(block, x_calib, act=record)
    act_params = {}
    if _is_static(act_spec):
        for name, parts in seen.items():
            act_params[name] = act_calibrator(np.concatenate(parts, axis=1 if name == "attn_probs" else 0), act_spec)
    wgt_params = {}
    if wgt_spec is not None:
        wgt_params = {name: wgt_calibrator(layer.W, wgt_spec) for name, layer in block.layers.items()}
    return QuantizedBlock(block, act_spec, wgt_spec, act_params, wgt_params)


def forward_quant(qblock: QuantizedBlock, x: np.ndarray, observe: Optional[dict] = None) -> np.ndarray:
    """Forward with fake quantization at every node.

    ``observe``, when given, is filled with ``name -> (float tensor, quantized tensor)``.
    """
    block, aspec, wspec = qblock.block, qblock.act_spec, qblock.wgt_spec
    if _is_static(aspec):
        missing = set(ACT_NODES[block.kind]) - set(qblock.act_params)
        if missing:
            raise BlockConfigError(f"activation nodes {sorted(missing)} are not calibrated")
    if wspec is not None:
        missing = set(block.layers) - set(qblock.wgt_params)
        if missing:
            raise BlockConfigError(f"weights {sorted(missing)} are not calibrated")

    def act(name, t):
        if aspec is None:
            out = t
        elif _is_static(aspec):
            params = qblock.act_params[name]
            out = fake_quant(t, params, aspec)
        else:
            out = fake_quant(t, calibrate_minmax(t, aspec), aspec)
        if observe is not None:
            prev = observe.get(name)
            if prev is None:
                observe[name] = (t, out)
            else:
                observe[name] = (np.concatenate([prev[0], t], 1), np.concatenate([prev[1], out], 1))
        return out

    def wgt(name, w):
        out = w if wspec is None else fake_quant(w, qblock.wgt_params[name], wspec)
        if observe is not None:
            observe["w_" + name] = (w, out)
        return out

    return _run(block, x, act, wgt)


def save_block(block: BlockGraph, directory) -> None:
    """Write a block as ``block.cfg`` plus one ``.ost`` container per parameter."""
    from .data_io import write_container

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = {
        "kind": block.kind,
        "eps": repr(block.eps),
        "head_dim": str(block.head_dim),
        "residual": str(block.residual).lower(),
        "causal": str(block.causal).lower(),
        "layers": ",".join(LAYER_NAMES[block.kind]),
        "fused_residual": str(block.res_scale is not None).lower(),
    }
    (d / "block.cfg").write_text("".join(f"{k}={v}\n" for k, v in sorted(lines.items())), encoding="utf-8")
    write_container(d / "ln_gamma.ost", "ln_gamma", block.gamma.reshape(1, -1))
    write_container(d / "ln_beta.ost", "ln_beta", block.beta.reshape(1, -1))
    for name, layer in block.layers.items():
        write_container(d / f"{name}_weight.ost", f"{name}_weight", layer.W)
        write_container(d / f"{name}_bias.ost", f"{name}_bias", layer.b.reshape(1, -1))
    if block.res_scale is not None:
        write_container(d / "res_scale.ost", "res_scale", block.res_scale.reshape(1, -1))
        write_container(d / "res_shift.ost", "res_shift", block.res_shift.reshape(1, -1))


def load_block(directory) -> BlockGraph:
    from .config import parse_kv
    from .data_io import read_container

    d = Path(directory)
    cfg = parse_kv((d / "block.cfg").read_text(encoding="utf-8"), source=str(d / "block.cfg"))
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise BlockConfigError(f"{d}: unknown block kind {kind!r}")

    def vec(name):
        return read_container(d / f"{name}.ost").reshape(-1)

    layers = {n: LinearLayer(read_container(d / f"{n}_weight.ost"), vec(f"{n}_bias")) for n in LAYER_NAMES[kind]}
    fused = cfg.get("fused_residual", "false") == "true"
    return BlockGraph(
        kind,
        vec("ln_gamma"),
        vec("ln_beta"),
        layers,
        eps=float(cfg.get("eps", LN_EPS)),
        head_dim=int(cfg.get("head_dim", 16)),
        residual=cfg.get("residual", "true") == "true",
        causal=cfg.get("causal", "false") == "true",
        res_scale=vec("res_scale") if fused else None,
        res_shift=vec("res_shift") if fused else None,
    )


def random_block(kind: str, rng, width: int = 64, heads: int = 4, expansion: int = 4, weight_std: float = None) -> BlockGraph:
    """Random block with N(0, 1/width) weights; ``rng`` needs ``standard_normal(size)``."""
    std = weight_std if weight_std is not None else 1.0 / np.sqrt(width)

    def linear(out_f, in_f):
        W = np.asarray(rng.standard_normal(out_f * in_f)).reshape(out_f, in_f) * std
        b = np.asarray(rng.standard_normal(out_f)) * 0.1
        return LinearLayer(W, b)

    if kind == "pre_ln_mha":
        layers = {n: linear(width, width) for n in ("q", "k", "v", "out")}
    elif kind == "post_ln_ffn":
        layers = {"up": linear(width * expansion, width), "down": linear(width, width * expansion)}
    elif kind == "linear_chain":
        layers = {"proj": linear(width, width)}
    else:
        raise BlockConfigError(f"unknown block kind {kind!r}")
    gamma = 1.0 + 0.2 * np.asarray(rng.standard_normal(width))
    beta = 0.1 * np.asarray(rng.standard_normal(width))
    return BlockGraph(kind, gamma, beta, layers, head_dim=width // heads)
