"""Shared value types, configuration and the token-accounting model."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping


class ConfigError(ValueError):
    pass


def fmt_ts(t: float) -> str:
    """Render a timestamp compactly: integral seconds without a decimal point."""
    if float(t).is_integer():
        return str(int(t))
    return repr(float(t))


@dataclass(frozen=True)
class FrameRef:
    ts: float
    payload_id: str
    caption: str = ""

    def __post_init__(self) -> None:
        if self.caption is None:
            object.__setattr__(self, "caption", "")


@dataclass(frozen=True)
class EngineConfig:
    tau_s: float = 8.0
    r_s: float = 2.0
    tau_m: float = 32.0
    r_m: float = 1.0
    n_f: int = 16
    n_r: int = 4
    lam: float = 0.1
    k_f: int = 2
    k_q: int = 1
    frame_token_cost: int = 256
    summary_token_cap: int = 256
    embed_dim: int = 256

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Mapping[str, object]) -> "EngineConfig":
        return cls(**_coerce(values))


# the flat config file uses "lambda"; the attribute can't
_FILE_ALIASES = {"lambda": "lam"}
_INT_FIELDS = {f.name for f in fields(EngineConfig) if f.type in ("int", int)}
_FIELD_NAMES = {f.name for f in fields(EngineConfig)}


def _coerce(values: Mapping[str, object]) -> dict:
    out = {}
    for key, raw in values.items():
        name = _FILE_ALIASES.get(key, key)
        if name not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        if name in _INT_FIELDS:
            as_float = float(raw)
            if not as_float.is_integer():
                raise ConfigError(f"{key} must be an integer, got {raw!r}")
            out[name] = int(as_float)
        else:
            out[name] = float(raw)
    return out


def validate_config(cfg: EngineConfig) -> EngineConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise ConfigError."""
    checks = [
        (cfg.tau_s > 0, "tau_s > 0 required"),
        (cfg.r_m > 0, "r_m > 0 required"),
        (cfg.tau_s < cfg.tau_m, "tau_s < tau_m required"),
        (cfg.r_m < cfg.r_s, "r_m < r_s required"),
        (cfg.n_r >= 2, "n_r ≥ 2"),
        (cfg.n_f >= 1, "n_f ≥ 1"),
        (cfg.lam >= 0, "lambda ≥ 0"),
        (cfg.k_f >= 1, "k_f ≥ 1"),
        (cfg.k_q >= 0, "k_q ≥ 0"),
        (cfg.frame_token_cost >= 0, "frame_token_cost ≥ 0"),
        (cfg.summary_token_cap >= 1, "summary_token_cap ≥ 1"),
        (cfg.embed_dim >= 1, "embed_dim ≥ 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    return cfg


def load_config(path: str | Path, overrides: Mapping[str, object] | None = None) -> EngineConfig:
    """Read a ``key = value`` file; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(EngineConfig.from_dict(values))


def dump_config(cfg: EngineConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        key = "lambda" if name == "lam" else name
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TokenBudget:
    frame_tokens: int = 0
    text_tokens: int = 0
    total: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "total", self.frame_tokens + self.text_tokens)

    def __add__(self, other: "TokenBudget") -> "TokenBudget":
        return TokenBudget(self.frame_tokens + other.frame_tokens, self.text_tokens + other.text_tokens)

    def to_dict(self) -> dict:
        return {"frame_tokens": self.frame_tokens, "text_tokens": self.text_tokens, "total": self.total}


def count_text_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def context_token_cost(frame_count: int, texts: Iterable[str], frame_token_cost: int = 256) -> TokenBudget:
    if frame_count < 0:
        raise ValueError("frame_count must be non-negative")
    return TokenBudget(
        frame_tokens=frame_count * frame_token_cost,
        text_tokens=sum(count_text_tokens(t) for t in texts),
    )


def clip_to_tokens(text: str, cap: int, keep: str = "head") -> str:
    """Trim ``text`` so that count_text_tokens(text) <= cap."""
    limit = cap * 4
    if len(text) <= limit:
        return text
    return text[:limit] if keep == "head" else text[-limit:]
