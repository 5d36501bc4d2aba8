"""Deterministic text reports and trace CSVs.

A report is a flat mapping written one ``key = value`` per line with keys in
sorted order. Nested dicts flatten to dotted keys, floats use ``%.17g`` (round
trip exact), arrays become comma-separated lists and booleans ``true``/``false``.
Leading ``#`` lines carry free-form header notes and are ignored on reading.
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .config import parse_kv


def fmt_float(v: float) -> str:
    return "%.17g" % float(v)


def fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    if isinstance(v, np.ndarray):
        return ",".join(fmt_value(e) for e in v.ravel().tolist())
    if isinstance(v, (list, tuple)):
        return ",".join(fmt_value(e) for e in v)
    text = str(v)
    if "\n" in text or "#" in text:
        raise ValueError(f"report values must be single-line and free of '#': {text!r}")
    return text


def flatten(tree: Mapping, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, full + "."))
        else:
            out[full] = fmt_value(value)
    return out


def render(tree: Mapping, header: Iterable[str] = ()) -> str:
    flat = flatten(tree)
    lines = [f"# {h}" for h in header]
    lines += [f"{k} = {flat[k]}" for k in sorted(flat)]
    return "\n".join(lines) + "\n"


def write_report(path, tree: Mapping, header: Iterable[str] = ()) -> str:
    text = render(tree, header)
    Path(path).write_text(text, encoding="utf-8")
    return text


def parse_report(text: str, source: str = "<report>") -> dict:
    """Parse report text back into a ``{key: raw string}`` dict."""
    return parse_kv(text, source)


def read_report(path) -> dict:
    path = Path(path)
    return parse_report(path.read_text(encoding="utf-8"), str(path))


def parse_floats(value: str) -> np.ndarray:
    return np.array([float(v) for v in value.split(",")]) if value else np.zeros(0)


def trace_csv(trace) -> str:
    buf = io.StringIO()
    buf.write("t,objective\n")
    for t, obj in trace:
        buf.write(f"{fmt_float(t)},{fmt_float(obj)}\n")
    return buf.getvalue()


def digest(*parts) -> str:
    """SHA-256 over the canonical text of each part (arrays hashed by their float64 bytes)."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        else:
            h.update(fmt_value(p).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()
