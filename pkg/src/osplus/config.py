"""Flat ``key=value`` config files and the resolved run configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict:
    """Parse UTF-8 ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _to_bool(v: str) -> bool:
    v = v.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    seed: int = 20240001
    bits: int = 6
    act_granularity: str = "tensor"
    wgt_granularity: str = "channel"
    method: str = "osplus"
    methods: str = "fixed_gamma,minmax,osplus,smoothquant_alpha"
    grid_points: int = 32
    grid_ratio: float = 50.0
    include_identity: bool = True
    percentile_candidates: str = "0.999,0.9999,0.99999"
    omse_grid_points: int = 100
    sq_alphas: str = "0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    top_k: int = 8
    outlier_factor: float = 3.0

    @classmethod
    def resolve(cls, file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> "RunConfig":
        """File values first, then non-``None`` overrides; unknown keys are rejected."""
        known = {f.name: f.type for f in fields(cls)}
        cfg = cls()
        for source in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
            for key, value in source.items():
                key = key.replace("-", "_")
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(known))}")
                default = getattr(cls(), key)
                try:
                    if isinstance(default, bool):
                        value = value if isinstance(value, bool) else _to_bool(str(value))
                    else:
                        value = type(default)(value)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None
                setattr(cfg, key, value)
        if cfg.seed < 0 or cfg.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return cfg

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def float_list(self, key: str) -> list:
        try:
            return [float(v) for v in getattr(self, key).split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of numbers") from None

    def name_list(self, key: str) -> list:
        return [v.strip() for v in getattr(self, key).split(",") if v.strip()]
