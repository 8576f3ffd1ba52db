"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from importlib import resources
from typing import Dict, List, Mapping

from .context import ConfigError

PRECISIONS = ("float32", "float64")

# short names accepted in config files
ALIASES = {"L": "n_layers", "H": "n_heads", "K": "k", "B": "batch_size", "lambda": "lam", "margin": "gamma"}


class ConfigValidationError(ConfigError):
    def __init__(self, problems: Dict[str, str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(f"{k}: {v}" for k, v in problems.items()))


@dataclass
class TrainConfig:
    """Hyperparameters. Defaults are the desk-scale setup."""

    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    p: int = 4
    q: int = 2
    k: int = 3
    batch_size: int = 16
    lam: float = 0.4
    gamma: float = 5.0
    dropout: float = 0.1
    leaky_slope: float = 0.2
    lr: float = 1e-3
    lr_decay: float = 1.0
    lr_decay_interval: int = 10000
    weight_decay: float = 0.0
    max_steps: int = 5000
    eval_interval: int = 500
    pretrain_steps: int = 0
    mask_rate: float = 0.15
    joint_masking: bool = True
    n_negatives: int = 1
    add_inverse: bool = True
    precision: str = "float32"
    seed: int = 0
    no_distant: bool = False
    no_global: bool = False
    no_local: bool = False

    def problems(self) -> Dict[str, str]:
        out = {}
        for name in ("d", "n_layers", "n_heads", "p", "k", "batch_size", "n_negatives"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                out[name] = "must be positive"
        if self.n_heads >= 1 and self.d % self.n_heads:
            out["n_heads"] = f"d={self.d} is not divisible by n_heads={self.n_heads}"
        if not 0 <= self.q <= self.p:
            out["q"] = f"must be in [0, p={self.p}]"
        if not 0.0 <= self.lam <= 1.0:
            out["lam"] = "must be in [0, 1]"
        if self.gamma <= 0:
            out["gamma"] = "must be positive"
        if not 0.0 <= self.dropout < 1.0:
            out["dropout"] = "must be in [0, 1)"
        if not 0.0 <= self.mask_rate <= 1.0:
            out["mask_rate"] = "must be in [0, 1]"
        if self.lr <= 0:
            out["lr"] = "must be positive"
        if self.lr_decay <= 0:
            out["lr_decay"] = "must be positive"
        for name in ("lr_decay_interval", "max_steps", "pretrain_steps", "weight_decay"):
            if getattr(self, name) < 0:
                out[name] = "must be non-negative"
        if self.eval_interval < 1:
            out["eval_interval"] = "must be positive"
        if self.precision not in PRECISIONS:
            out["precision"] = f"must be one of {PRECISIONS}"
        if self.no_global and self.no_local:
            out["no_global"] = "no_global and no_local cannot both be set"
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigValidationError(problems)
        return self

    @property
    def effective_lam(self) -> float:
        if self.no_global:
            return 0.0
        if self.no_local:
            return 1.0
        return self.lam

    @property
    def effective_q(self) -> int:
        return 0 if self.no_distant else self.q

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, object]) -> "TrainConfig":
        return cls(**_coerce(values))

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(values: Mapping[str, object]) -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out, problems = {}, {}
    for raw_key, raw in values.items():
        key = ALIASES.get(raw_key, raw_key)
        if key not in types:
            problems[raw_key] = "unknown key"
            continue
        typ = types[key]
        try:
            out[key] = _parse_value(raw, typ)
        except ValueError as exc:
            problems[raw_key] = str(exc)
    if problems:
        raise ConfigValidationError(problems)
    return out


def _parse_value(raw, typ: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if typ == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typ == "int":
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {text!r}") from None
    if typ == "float":
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"expected a number, got {text!r}") from None
    return text


def parse_config_text(text: str) -> Dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError({f"line {lineno}": "expected key = value"})
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def preset_names() -> List[str]:
    return sorted(
        os.path.splitext(p.name)[0] for p in resources.files("fskgc").joinpath("presets").iterdir() if p.name.endswith(".cfg")
    )


def resolve_config_path(path: str) -> str:
    """Return ``path`` if it exists, else the bundled preset with the same file name."""
    if os.path.isfile(path):
        return path
    name = os.path.basename(path)
    if not name.endswith(".cfg"):
        name += ".cfg"
    bundled = resources.files("fskgc").joinpath("presets").joinpath(name)
    if bundled.is_file():
        return str(bundled)
    raise ConfigValidationError({"config": f"no such config file or preset: {path}"})


def load_config(path: str, **overrides) -> TrainConfig:
    with open(resolve_config_path(path), encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values).validate()
