"""``.ost`` tensor containers and the planted-outlier synthetic generator.

Container layout (all integers little-endian)::

    8 bytes   magic b"OSPTENS1"
    4 bytes   u32 header length H
    H bytes   UTF-8 header, JSON object {"cols", "dtype", "name", "rows"}, sorted keys
    payload   rows * cols IEEE-754 values, row-major, little-endian f32 or f64
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .prng import Xoshiro256pp
from .tensor_core import as_matrix

MAGIC = b"OSPTENS1"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class HeaderError(ContainerError):
    """Malformed header, or a payload whose size disagrees with the declared shape."""


def encode_container(name: str, m, dtype: str = "f64") -> bytes:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    m = as_matrix(m, name)
    header = json.dumps(
        {"cols": m.shape[1], "dtype": dtype, "name": name, "rows": m.shape[0]},
        sort_keys=True,
        ensure_ascii=False,
    ).encode("utf-8")
    # astype rounds f64 -> f32 to nearest-even exactly once
    payload = np.ascontiguousarray(m.astype(DTYPES[dtype])).tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_container(buf: bytes, source: str = "<bytes>") -> tuple[str, np.ndarray]:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: not an .ost container (bad magic {buf[:8]!r})")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise TruncatedError(f"{source}: truncated before header length")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + hlen:
        raise TruncatedError(f"{source}: header needs {hlen} bytes, only {len(buf) - pos} present")
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
        rows, cols, dtype, name = int(header["rows"]), int(header["cols"]), header["dtype"], str(header["name"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise HeaderError(f"{source}: malformed header ({e})") from None
    if dtype not in DTYPES or rows < 0 or cols < 0:
        raise HeaderError(f"{source}: bad header values rows={rows} cols={cols} dtype={dtype!r}")
    pos += hlen
    expected = rows * cols * DTYPES[dtype].itemsize
    actual = len(buf) - pos
    if actual < expected:
        raise TruncatedError(f"{source}: payload truncated, expected {expected} bytes, got {actual}")
    if actual > expected:
        raise HeaderError(
            f"{source}: payload has {actual} bytes but header shape {rows}x{cols} {dtype} needs {expected}"
        )
    data = np.frombuffer(buf, dtype=DTYPES[dtype], count=rows * cols, offset=pos)
    return name, data.astype(np.float64).reshape(rows, cols)


def write_container(path, name: str, m, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_container(name, m, dtype))


def read_container(path) -> np.ndarray:
    return read_named(path)[1]


def read_named(path) -> tuple[str, np.ndarray]:
    return decode_container(Path(path).read_bytes(), source=str(path))


@dataclass(frozen=True)
class SyntheticSpec:
    rows: int = 32
    cols: int = 64
    n_outlier_channels: int = 2
    outlier_centers: tuple = (-77.5, 24.0)
    outlier_half_range: float = 19.5
    base_sigma: float = 1.0
    seed: int = 20240001

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if not 0 <= self.n_outlier_channels <= self.cols:
            raise ValueError(f"n_outlier_channels={self.n_outlier_channels} must lie in [0, cols={self.cols}]")
        if not self.outlier_half_range > 0:
            raise ValueError("outlier_half_range must be positive")
        if self.n_outlier_channels and not self.outlier_centers:
            raise ValueError("outlier channels need at least one center")


def pick_outlier_channels(rng: Xoshiro256pp, cols: int, n: int) -> list:
    return sorted(rng.permutation(cols)[:n])


def generate_synthetic(spec: SyntheticSpec) -> np.ndarray:
    """Gaussian channels plus ``n_outlier_channels`` uniform outlier channels.

    Outlier channel indices are drawn first from the seeded stream; the
    ``k``-th outlier channel (in index order) gets ``outlier_centers[k % len]``.
    Values are then drawn row-major: one normal per regular element, one
    uniform per outlier element.
    """
    rng = Xoshiro256pp(spec.seed)
    chans = pick_outlier_channels(rng, spec.cols, spec.n_outlier_channels)
    center = {c: spec.outlier_centers[k % len(spec.outlier_centers)] for k, c in enumerate(chans)}
    out = np.empty((spec.rows, spec.cols))
    for i in range(spec.rows):
        for j in range(spec.cols):
            if j in center:
                out[i, j] = rng.uniform(center[j] - spec.outlier_half_range, center[j] + spec.outlier_half_range)
            else:
                out[i, j] = spec.base_sigma * rng.standard_normal()
    return out
