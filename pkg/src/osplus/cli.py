"""Command-line entry point: ``osplus <command> [flags]``.

Commands
--------
analyze    per-channel range table and outlier channel flags for one tensor
suppress   shift, threshold search, scale and fuse one block; writes the transform
compare    run several methods with identical specs and calibration data
eval       fake-quantized vs floating-point output of a block
synth      write a synthetic outlier activation tensor
benchmark  write the planted-outlier benchmark (calibration tensor + block)

Exit codes: 0 success, 2 configuration error, 3 data/parse error,
4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .benchmark import make_benchmark
from .blocks import ACT_NODES, KINDS, BlockConfigError, calibrate_block, forward_fp, forward_quant, fuse_block, ln_output, load_block, save_block
from .config import ConfigError, RunConfig, parse_kv
from .data_io import ContainerError, SyntheticSpec, generate_synthetic, read_named, write_container
from .methods import METHODS, MethodResult, UnknownMethodError, evaluate, run_method, search_structure
from .quantizer import QuantConfigError, QuantSpec, activation_spec, quant_mse, weight_spec
from .report import digest, render, trace_csv
from .search import SearchConfig, SearchError, default_grid, grid_search_threshold
from .tensor_core import LN_EPS, DimensionError, EmptyInputError, channel_stats
from .transform import TransformVectors, apply_transform, compute_scale, compute_shift

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
SUPPRESS_METHODS = ("osplus", "osplus_noscale", "osplus_noshift", "osplus_sumloss")
ACT_GRANULARITIES = ("tensor", "token", "none")
CONFIG_ERRORS = (ConfigError, UnknownMethodError, QuantConfigError, BlockConfigError, SearchError)
DATA_ERRORS = (ContainerError, DimensionError, EmptyInputError, OSError)


class InvariantError(RuntimeError):
    """A property the pipeline guarantees did not hold (exit code 4)."""


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def exit_code_for(exc: BaseException, stage: str = "") -> int:
    if isinstance(exc, CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    if stage == "load" and isinstance(exc, ValueError):
        return EXIT_DATA
    return EXIT_INTERNAL


@contextmanager
def stage(name: str):
    """Re-raise any failure as a ``CliError`` naming the pipeline stage."""
    try:
        yield
    except CliError:
        raise
    except Exception as e:
        raise CliError(exit_code_for(e, name), f"stage {name}: {type(e).__name__}: {e}") from e


# -- configuration -----------------------------------------------------------


def resolve_config(config_path: Optional[str], overrides: dict) -> RunConfig:
    file_values = {}
    if config_path:
        path = Path(config_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        file_values = parse_kv(text, str(path))
    cfg = RunConfig.resolve(file_values, overrides)
    if cfg.act_granularity not in ACT_GRANULARITIES:
        raise ConfigError(f"act_granularity must be one of {ACT_GRANULARITIES}, got {cfg.act_granularity!r}")
    if cfg.wgt_granularity not in ("tensor", "channel", "none") and not cfg.wgt_granularity.startswith("group:"):
        raise ConfigError(f"wgt_granularity must be tensor, channel, group:N or none, got {cfg.wgt_granularity!r}")
    specs(cfg)  # surface bad bits / group sizes as configuration errors up front
    return cfg


def specs(cfg: RunConfig) -> tuple[Optional[QuantSpec], Optional[QuantSpec]]:
    """Activation and weight specs; granularity ``none`` disables that quantizer."""
    act = None if cfg.act_granularity == "none" else activation_spec(cfg.bits, cfg.act_granularity)
    wgt = None if cfg.wgt_granularity == "none" else weight_spec(cfg.bits, cfg.wgt_granularity)
    return act, wgt


def describe(spec: Optional[QuantSpec]) -> str:
    return "none" if spec is None else spec.describe()


def common_fields(cfg: RunConfig, command: str) -> dict:
    echo = cfg.as_dict()
    return {
        "command": command,
        "config": echo,
        "config_hash": digest(*(f"{k}={echo[k]}" for k in sorted(echo))),
        "tool_version": __version__,
    }


def header(kind: Optional[str] = None, eps: float = LN_EPS) -> list:
    lines = ["osplus report (key = value, sorted keys, floats with 17 significant digits)"]
    if kind is not None:
        lines.append(f"quantization nodes: activations {','.join(ACT_NODES[kind])}; every linear weight")
        lines.append(f"layernorm: population variance, eps={eps!r}")
        lines.append("output_change_mse: mean over tokens of the squared output-row error vs the floating-point block")
    return lines


def load_input(path) -> tuple[str, np.ndarray]:
    with stage("load"):
        return read_named(path)


def load_pair(input_path, block_dir):
    name, x = load_input(input_path)
    with stage("load"):
        block = load_block(block_dir)
        if x.shape[1] != block.width:
            raise DimensionError(f"{input_path} has {x.shape[1]} channels but the block expects {block.width}")
    return name, x, block


def emit(text: str, out: Optional[str], filename: str) -> None:
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / filename).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def tv_fields(tv: TransformVectors) -> dict:
    return {"z": tv.z, "s": tv.s, "t": tv.t}


# -- commands ------------------------------------------------------------------


def cmd_analyze(input_path, cfg: RunConfig) -> str:
    name, x = load_input(input_path)
    with stage("stats"):
        lo, hi = channel_stats(x)
        center = (hi + lo) / 2.0
        half = (hi - lo) / 2.0
        absmax = np.maximum(np.abs(lo), np.abs(hi))
        median = float(np.median(absmax))
        flagged = [j for j in range(x.shape[1]) if absmax[j] > 0 and absmax[j] > cfg.outlier_factor * median]
        order = sorted(range(x.shape[1]), key=lambda j: (-abs(center[j]), j))
        width = len(str(x.shape[1] - 1))
    tree = common_fields(cfg, "analyze")
    tree["tensor"] = {
        "name": name,
        "rows": x.shape[0],
        "cols": x.shape[1],
        "range_lo": float(lo.min()),
        "range_hi": float(hi.max()),
        "max_channel_range": float((hi - lo).max()),
        "median_channel_absmax": median,
    }
    tree["channel"] = {
        str(j).zfill(width): {"min": lo[j], "max": hi[j], "center": center[j], "half_range": half[j]}
        for j in range(x.shape[1])
    }
    tree["outlier_channels"] = flagged
    tree["n_outlier_channels"] = len(flagged)
    tree["top_asymmetric"] = order[: cfg.top_k]
    return render(tree, header())


def _record_fields(rec) -> Optional[dict]:
    if rec is None:
        return None
    return {"name": rec.name, "range_lo": rec.range_lo, "range_hi": rec.range_hi, "quant_mse": rec.quant_mse}


def cmd_suppress(input_path, block_dir, cfg: RunConfig, out) -> str:
    """Shift, search, scale and fuse; writes transform.ost, fused_block/, report.txt and trace.csv."""
    if cfg.method not in SUPPRESS_METHODS:
        raise ConfigError(f"suppress supports methods {', '.join(SUPPRESS_METHODS)}, got {cfg.method!r}")
    name, x, block = load_pair(input_path, block_dir)
    act_spec, wgt_spec = specs(cfg)
    with stage("shift"):
        a = ln_output(block, x)
        z = np.zeros(block.width) if cfg.method == "osplus_noshift" else compute_shift(a)
    result = None
    structure = "none"
    if cfg.method != "osplus_noscale":
        with stage("search"):
            structure, layers = search_structure(block, cfg.method)
            scfg = SearchConfig(
                default_grid(a, z, cfg.grid_points, cfg.grid_ratio),
                cfg.include_identity,
                act_spec,
                wgt_spec,
                block.head_dim,
                block.causal,
            )
            result = grid_search_threshold(a, structure, layers, z, scfg)
    with stage("scale"):
        if result is None:
            tv = TransformVectors(z, np.ones(block.width))
        else:
            tv = TransformVectors(z, compute_scale(a, z, result.t), result.t)
    with stage("fuse"):
        fused = fuse_block(block, tv)
    with stage("evaluate"):
        qblock, change = evaluate(block, x, tv, act_spec, wgt_spec)
        moved = apply_transform(a, tv)
        fused_gap = float(np.max(np.abs(ln_output(fused, x) - moved)))
        inside = bool(np.all(np.abs(moved) <= tv.t))
    with stage("verify"):
        if not inside:
            raise InvariantError(f"transformed activations leave [-{tv.t!r}, {tv.t!r}]")

    tree = common_fields(cfg, "suppress")
    tree.update(
        {
            "input": {"name": name, "rows": x.shape[0], "cols": x.shape[1], "sha256": digest(x)},
            "block": {"kind": block.kind, "width": block.width},
            "specs": {"activation": describe(act_spec), "weight": describe(wgt_spec)},
            "transform": tv_fields(tv),
            "search": {
                "structure": structure,
                "t": tv.t,
                "objective": result.objective if result else float("nan"),
                "candidates": len(result.per_candidate_trace) if result else 0,
                "trace_t": [t for t, _ in result.per_candidate_trace] if result else [],
                "trace_objective": [o for _, o in result.per_candidate_trace] if result else [],
            },
            "activation_before": {"range_lo": float(a.min()), "range_hi": float(a.max())},
            "activation_after": {"range_lo": float(moved.min()), "range_hi": float(moved.max()), "within_threshold": inside},
            "fused_ln_max_abs_deviation": fused_gap,
            "output_change_mse": change,
        }
    )
    if act_spec is not None and "ln_out" in qblock.act_params:
        tree["activation_after"]["quant_mse"] = quant_mse(moved, qblock.act_params["ln_out"], act_spec)
    text = render(tree, header(block.kind, block.eps))
    with stage("write"):
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        write_container(d / "transform.ost", "transform_z_s", np.vstack([tv.z, tv.s]))
        save_block(fused, d / "fused_block")
        (d / "trace.csv").write_text(trace_csv(result.per_candidate_trace if result else []), encoding="utf-8")
        (d / "report.txt").write_text(text, encoding="utf-8")
    return text


def _method_fields(res: MethodResult, x: np.ndarray) -> dict:
    fields = {
        "activation": _record_fields(res.activation) or "none",
        "weight": _record_fields(res.weight) or "none",
        "output_change_mse": res.output_change_mse,
        "transform": tv_fields(res.tv),
        "fairness_hash": digest(describe(res.qblock.act_spec), describe(res.qblock.wgt_spec), x),
    }
    if res.search is not None:
        fields["search"] = {"t": res.search.t, "objective": res.search.objective, "candidates": len(res.search.per_candidate_trace)}
    if res.extra:
        fields["extra"] = {k: v for k, v in sorted(res.extra.items())}
    return fields


def cmd_compare(input_path, block_dir, cfg: RunConfig) -> str:
    methods = sorted(set(cfg.name_list("methods")))
    if not methods:
        raise ConfigError("compare needs at least one method")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UnknownMethodError(f"unknown method(s) {', '.join(unknown)}; valid methods: {', '.join(METHODS)}")
    name, x, block = load_pair(input_path, block_dir)
    act_spec, wgt_spec = specs(cfg)
    per_method = {}
    for m in methods:
        with stage(f"method {m}"):
            per_method[m] = _method_fields(run_method(m, block, x, act_spec, wgt_spec, cfg), x)
    fairness = digest(describe(act_spec), describe(wgt_spec), x)
    bad = [m for m, f in per_method.items() if f["fairness_hash"] != fairness]
    with stage("verify"):
        if bad:
            raise InvariantError(f"methods {bad} ran with different specs or data")
    tree = common_fields(cfg, "compare")
    tree.update(
        {
            "input": {"name": name, "rows": x.shape[0], "cols": x.shape[1], "sha256": digest(x)},
            "block": {"kind": block.kind, "width": block.width},
            "specs": {"activation": describe(act_spec), "weight": describe(wgt_spec)},
            "fairness_hash": fairness,
            "methods": methods,
            "method": per_method,
            "ranking": sorted(methods, key=lambda m: (per_method[m]["output_change_mse"], m)),
        }
    )
    return render(tree, header(block.kind, block.eps))


def cmd_eval(block_dir, input_path, cfg: RunConfig, calib_path=None) -> str:
    name, x, block = load_pair(input_path, block_dir)
    x_calib = x
    if calib_path is not None:
        _, x_calib = load_input(calib_path)
        if x_calib.shape[1] != block.width:
            raise CliError(EXIT_DATA, f"stage load: {calib_path} has {x_calib.shape[1]} channels, block expects {block.width}")
    act_spec, wgt_spec = specs(cfg)
    with stage("calibrate"):
        qblock = calibrate_block(block, x_calib, act_spec, wgt_spec)
    with stage("forward"):
        observed = {}
        out_q = forward_quant(qblock, x, observe=observed)
        out_fp = forward_fp(block, x)
        d = out_q - out_fp
        change = float(np.sum(d * d) / x.shape[0])
    nodes = {}
    for node, (t, tq) in sorted(observed.items()):
        e = tq - t
        nodes[node] = {"range_lo": float(t.min()), "range_hi": float(t.max()), "quant_mse": float(np.mean(e * e))}
    tree = common_fields(cfg, "eval")
    tree.update(
        {
            "input": {"name": name, "rows": x.shape[0], "cols": x.shape[1], "sha256": digest(x)},
            "calibration_sha256": digest(x_calib),
            "block": {"kind": block.kind, "width": block.width},
            "specs": {"activation": describe(act_spec), "weight": describe(wgt_spec)},
            "node": nodes,
            "output_change_mse": change,
        }
    )
    return render(tree, header(block.kind, block.eps))


def cmd_synth(cfg: RunConfig, out, rows: int, cols: int, outliers: int) -> str:
    with stage("generate"):
        x = generate_synthetic(SyntheticSpec(rows=rows, cols=cols, n_outlier_channels=outliers, seed=cfg.seed))
    path = Path(out) / "synthetic.ost"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_container(path, "synthetic", x)
    return f"{path}\n"


def cmd_benchmark(cfg: RunConfig, out, kind: str, residual: bool) -> str:
    with stage("generate"):
        bm = make_benchmark(cfg.seed, kind, residual=residual)
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    write_container(d / "calib.ost", "calib", bm.x_calib)
    save_block(bm.block, d / "block")
    return f"{d / 'calib.ost'}\n{d / 'block'}\n"


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--bits", type=int, choices=(4, 6, 8))
    common.add_argument("--act-granularity", help="tensor | token | none")
    common.add_argument("--wgt-granularity", help="tensor | channel | group:N | none")
    common.add_argument("--method", help="method name (compare: comma-separated list)")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="osplus", description="Channel-wise shifting and scaling for quantization.")
    p.add_argument("--version", action="version", version=f"osplus {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("analyze", parents=[common], help="per-channel statistics of a tensor")
    a.add_argument("input")
    s = sub.add_parser("suppress", parents=[common], help="search and fuse a transform into a block")
    s.add_argument("input")
    s.add_argument("block")
    c = sub.add_parser("compare", parents=[common], help="compare methods on one block")
    c.add_argument("input")
    c.add_argument("block")
    e = sub.add_parser("eval", parents=[common], help="quantized vs floating-point output of a block")
    e.add_argument("block")
    e.add_argument("input")
    e.add_argument("--calib", help="calibration tensor (defaults to the input)")
    y = sub.add_parser("synth", parents=[common], help="write a synthetic outlier tensor")
    y.add_argument("--rows", type=int, default=1024)
    y.add_argument("--cols", type=int, default=64)
    y.add_argument("--outliers", type=int, default=2)
    b = sub.add_parser("benchmark", parents=[common], help="write the planted-outlier benchmark")
    b.add_argument("--kind", choices=KINDS, default="linear_chain")
    b.add_argument("--residual", action="store_true")
    return p


def run(args: argparse.Namespace) -> str:
    overrides = {
        "seed": args.seed,
        "bits": args.bits,
        "act_granularity": args.act_granularity,
        "wgt_granularity": args.wgt_granularity,
    }
    if args.method is not None:
        overrides["methods" if args.command == "compare" else "method"] = args.method
    cfg = resolve_config(args.config, overrides)
    if args.command == "analyze":
        text = cmd_analyze(args.input, cfg)
        emit(text, args.out, "analyze.txt")
    elif args.command == "suppress":
        if not args.out:
            raise ConfigError("suppress needs --out")
        text = cmd_suppress(args.input, args.block, cfg, args.out)
        sys.stdout.write(text)
    elif args.command == "compare":
        text = cmd_compare(args.input, args.block, cfg)
        emit(text, args.out, "compare.txt")
    elif args.command == "eval":
        text = cmd_eval(args.block, args.input, cfg, args.calib)
        emit(text, args.out, "eval.txt")
    else:
        if not args.out:
            raise ConfigError(f"{args.command} needs --out")
        if args.command == "synth":
            text = cmd_synth(cfg, args.out, args.rows, args.cols, args.outliers)
        else:
            text = cmd_benchmark(cfg, args.out, args.kind, args.residual)
        sys.stdout.write(text)
    return text


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except CliError as e:
        print(f"osplus {args.command}: {e}", file=sys.stderr)
        return e.code
    except Exception as e:
        print(f"osplus {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
