"""Flat ``key = value`` experiment configuration.

Files are UTF-8 text; ``#`` starts a comment; keys are dotted
(``model.window_size = 7``) and lists are comma separated
(``model.heads = 8, 4, 2, 1``).  Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ContractError
from .model import ModelConfig


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    train_size: int = 200
    val_size: int = 50


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    eval_every: int = 500


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LossConfig:
    lam: float = 0.85
    alpha: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")


@dataclass
class EvalConfig:
    cap: float = 10.0
    min_depth: float = 1e-3


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.model.seed = self.seed


# "lambda" is a Python keyword, so the file key maps onto ``lam``.
_ALIASES = {"loss.lambda": ("loss", "lam")}
_SECTIONS = ("model", "data", "train", "adam", "loss", "eval")


def _field_types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _parse_value(key: str, raw: str, typ) -> typing.Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            (inner, *_) = typing.get_args(typ)
            return tuple(inner(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(key, f"unsupported field type {typ}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _resolve(key: str) -> tuple[str | None, str]:
    if key in _ALIASES:
        return _ALIASES[key]
    if key == "seed":
        return None, "seed"
    if "." not in key:
        # A bare field name is accepted when exactly one section owns it.
        owners = [s for s in _SECTIONS if key in _field_types(type(getattr(ExperimentConfig(), s)))
                  and key != "seed"]
        if len(owners) != 1:
            raise ConfigError(key, "unknown key" if not owners else f"ambiguous key; use one of "
                              + ", ".join(f"{s}.{key}" for s in owners))
        return owners[0], key
    section, _, name = key.partition(".")
    if section not in _SECTIONS or not name or "." in name:
        raise ConfigError(key, "unknown key")
    return section, name


def parse_lines(lines: typing.Iterable[str]) -> dict[str, str]:
    """Read ``key = value`` lines into an ordered mapping of raw strings."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        out[key] = value
    return out


def build_config(values: dict[str, str]) -> ExperimentConfig:
    """Apply raw string values on top of the defaults; rejects unknown keys."""
    seed = 0
    sections: dict[str, dict[str, typing.Any]] = {s: {} for s in _SECTIONS}
    for key, raw in values.items():
        section, name = _resolve(key)
        if section is None:
            seed = _parse_value(key, raw, int)
            continue
        cls = type(getattr(ExperimentConfig(), section))
        types = _field_types(cls)
        if name not in types or name == "seed":
            raise ConfigError(key, "unknown key")
        sections[section][name] = _parse_value(key, raw, types[name])
    try:
        built = {s: type(getattr(ExperimentConfig(), s))(**kw) for s, kw in sections.items()}
    except ContractError as exc:
        bad = next((f"{s}.{k}" for s, kw in sections.items() for k in kw), "config")
        raise ConfigError(bad, str(exc)) from None
    return ExperimentConfig(seed=seed, **built)


def load_config(path: str | Path | None, overrides: typing.Sequence[str] = ()) -> ExperimentConfig:
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        values.update(parse_lines(path.read_text(encoding="utf-8").splitlines()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        values[key] = value
    return build_config(values)


def to_lines(cfg: ExperimentConfig) -> list[str]:
    """Serialize every key so that ``build_config(parse_lines(...))`` round-trips."""
    lines = [f"seed = {cfg.seed}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if section == "model" and f.name == "seed":
                continue
            key = "loss.lambda" if (section, f.name) == ("loss", "lam") else f"{section}.{f.name}"
            lines.append(f"{key} = {_format_value(getattr(obj, f.name))}")
    return lines
