from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from canon import status_line

try:
    import tomllib  # type: ignore
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib  # type: ignore

ENV_PREFIX = "EGPG_"

ABLATIONS: Dict[str, Tuple[bool, bool]] = {
    # name -> (keep ccl, keep scl)
    "full": (True, True),
    "no-ccl": (False, True),
    "no-scl": (True, False),
    "no-both": (False, False),
}


class ConfigError(ValueError):
    pass


_TRUE = ("1", "true", "yes", "y", "on")
_FALSE = ("0", "false", "no", "n", "off")


def _warn_env(k: str, raw: str, default: Any) -> None:
    status_line("WARN_ENV", key=k, value=raw, using=default)


def _env_bool(k: str, default: bool) -> bool:
    v = (os.getenv(k, "") or "").strip().lower()
    if not v:
        return bool(default)
    if v not in _TRUE and v not in _FALSE:
        _warn_env(k, v, bool(default))
        return bool(default)
    return v in _TRUE


def _env_int(k: str, default: int) -> int:
    v = (os.getenv(k, "") or "").strip()
    if not v:
        return int(default)
    try:
        return int(v)
    except ValueError:
        _warn_env(k, v, int(default))
        return int(default)


def _env_float(k: str, default: float) -> float:
    v = (os.getenv(k, "") or "").strip()
    if not v:
        return float(default)
    try:
        return float(v)
    except ValueError:
        _warn_env(k, v, float(default))
        return float(default)


def _env_str(k: str, default: str) -> str:
    v = os.getenv(k, "")
    return (v if v is not None else default).strip() or default


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-4
    lambda_ccl: float = 0.1
    lambda_scl: float = 0.1
    tau: float = 0.5
    teacher_forcing_rate: float = 1.0
    max_len: int = 15
    seed: int = 12345
    normalize_features: bool = True
    batch_mean_loss: bool = False
    grad_clip: float = 5.0

    d_emb: int = 300
    k_c: int = 512
    k_s: int = 768
    style_layers: int = 4
    style_heads: int = 8
    style_ff: int = 3072
    decoder_hidden: Optional[int] = None
    dropout: float = 0.1

    min_freq: int = 1
    beam_width: int = 1
    embeddings_path: Optional[str] = None
    prefetch_batches: int = 2
    eval_block_rows: int = 1024
    deterministic: bool = True

    @field_validator(
        "batch_size", "epochs", "max_len", "d_emb", "k_c", "k_s",
        "style_layers", "style_heads", "style_ff", "min_freq", "beam_width", "eval_block_rows",
    )
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("learning_rate", "tau")
    @classmethod
    def _strictly_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("lambda_ccl", "lambda_scl", "grad_clip")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if not (v >= 0 and v != float("inf")):
            raise ValueError("must be finite and >= 0")
        return v

    @field_validator("teacher_forcing_rate", "dropout")
    @classmethod
    def _unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @field_validator("prefetch_batches")
    @classmethod
    def _prefetch(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "TrainConfig":
        if self.k_s % self.style_heads != 0:
            raise ValueError(f"k_s={self.k_s} must be divisible by style_heads={self.style_heads}")
        if self.decoder_hidden is not None and self.decoder_hidden < 1:
            raise ValueError("decoder_hidden must be >= 1 when set")
        return self

    def with_overrides(self, **kw: Any) -> "TrainConfig":
        d = self.model_dump()
        d.update({k: v for k, v in kw.items() if v is not None})
        return build_config(d)

    def with_ablation(self, name: str) -> "TrainConfig":
        l1, l2 = ablation_weights(name, self.lambda_ccl, self.lambda_scl)
        return self.with_overrides(lambda_ccl=l1, lambda_scl=l2)


def build_config(d: Mapping[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**dict(d))
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def ablation_weights(name: str, lambda_ccl: float = 0.1, lambda_scl: float = 0.1) -> Tuple[float, float]:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    keep_c, keep_s = ABLATIONS[name]
    return (lambda_ccl if keep_c else 0.0, lambda_scl if keep_s else 0.0)


def read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            d = json.loads(raw.decode("utf-8"))
        else:
            d = tomllib.loads(raw.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a table of keys")
    # allow an optional [train] table
    if "train" in d and isinstance(d["train"], dict):
        d = d["train"]
    return d


def env_overrides(base: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Values from `EGPG_<KEY>` variables, parsed against the type of the lower layer."""
    base = dict(base or {})
    out: Dict[str, Any] = {}
    for name, f in TrainConfig.model_fields.items():
        key = ENV_PREFIX + name.upper()
        if not (os.getenv(key, "") or "").strip():
            continue
        default = base.get(name, f.default)
        ann = f.annotation
        if ann is bool:
            out[name] = _env_bool(key, bool(default))
        elif ann is int:
            out[name] = _env_int(key, int(default))
        elif ann is float:
            out[name] = _env_float(key, float(default))
        elif name == "decoder_hidden":
            v = _env_int(key, -1)
            if v > 0:
                out[name] = v
        else:
            out[name] = _env_str(key, "" if default is None else str(default))
    return out


def resolve_config(
    config_path: Optional[Path] = None,
    cli_overrides: Optional[Mapping[str, Any]] = None,
    ablation: Optional[str] = None,
) -> TrainConfig:
    """defaults < config file < EGPG_* environment < explicit CLI flags; then the ablation."""
    layered: Dict[str, Any] = {}
    if config_path is not None:
        layered.update(read_config_file(config_path))
    layered.update(env_overrides(layered))
    layered.update({k: v for k, v in (cli_overrides or {}).items() if v is not None})
    cfg = build_config(layered)
    if ablation:
        cfg = cfg.with_ablation(ablation)
    return cfg


@dataclass(frozen=True)
class CLISettings:
    workers: int
    write_metrics: bool
    eval_csv: str

    @staticmethod
    def from_env() -> "CLISettings":
        return CLISettings(
            workers=max(1, _env_int("EGPG_WORKERS", 1)),
            write_metrics=_env_bool("EGPG_METRICS_TEXTFILE", True),
            eval_csv=_env_str("EGPG_EVAL_CSV", "eval_report.csv"),
        )
