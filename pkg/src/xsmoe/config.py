"""Run configuration: flat key=value files, env overrides, strict validation.

Unknown keys are rejected outright; a misconfigured streaming run is
expensive, so everything fails before any training starts. Every run
writes its fully resolved config next to its outputs so it can be
reproduced bit-exactly.
"""

import os
from dataclasses import dataclass, fields

from .errors import ConfigError

ENV_PREFIX = "XSMOE_"

VARIANTS = ("xsmoe", "static", "noft", "visual", "textual")


@dataclass
class RunConfig:
    # run identity
    seed: int = 0
    variant: str = "xsmoe"

    # model dimensions (desk-scale defaults; paper scale: d=768, d_prime=64,
    # batch_size=256, twelve backbone layers grouped six and six)
    d: int = 32
    d_prime: int = 8
    d_embed: int = 32
    side_layers: int = 2
    group_factor: int = 1
    max_seq_len: int = 10
    heads: int = 2
    blocks: int = 2
    ffn_dim: int = 0          # 0 -> same as d_embed
    dropout: float = 0.1

    # window schedule
    lr_init: float = 0.001
    lr_decay: float = 0.95
    lr_min: float = 0.0001
    patience: int = 5
    batch_size: int = 128
    max_epochs: int = 0       # 0 -> bounded only by the lr floor
    tau: float = 0.1

    # stream protocol
    chunks: int = 10          # T+1
    eval_next_chunk_fraction: float = 1.0
    filter_seen: bool = False
    utilization_includes_backbone: bool = False

    # execution
    eval_workers: int = 0     # 0 -> all available cores
    measure_timing: bool = True

    # paths
    interactions: str = ""
    visual_cache: str = ""
    textual_cache: str = ""
    output_dir: str = "out"

    def required_modalities(self):
        return {
            "visual": ("visual",),
            "textual": ("textual",),
        }.get(self.variant, ("visual", "textual"))

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        for key in ("d", "d_prime", "d_embed", "side_layers", "group_factor",
                    "max_seq_len", "heads", "blocks", "patience", "batch_size"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.d_embed % self.heads != 0:
            raise ConfigError(f"d_embed={self.d_embed} not divisible by heads={self.heads}")
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau={self.tau} outside [0, 1]")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.lr_init <= 0 or self.lr_min <= 0 or not (0 < self.lr_decay <= 1):
            raise ConfigError("learning-rate schedule values out of range")
        if self.chunks < 3:
            raise ConfigError("need at least 3 chunks (warm-up, train, test)")
        if not (0.0 < self.eval_next_chunk_fraction <= 1.0):
            raise ConfigError("eval_next_chunk_fraction outside (0, 1]")
        if self.max_epochs < 0 or self.eval_workers < 0:
            raise ConfigError("max_epochs and eval_workers must be >= 0")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool" or kind is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: '{raw}'")


def parse_config_text(text, source="<config>") -> dict:
    """Parse `key = value` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        out[key] = _coerce(key, raw)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key in _FIELDS:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Defaults, then config file, then environment, then explicit overrides."""
    merged = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            merged.update(parse_config_text(fh.read(), source=str(path)))
    merged.update(env_overrides(environ))
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        merged[key] = val
    return RunConfig(**merged).validate()


def resolved_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
