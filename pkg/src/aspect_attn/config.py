"""Run configuration: one JSON file plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .attention import VARIANTS
from .errors import ConfigError
from .protocol import EvalConfig, TrainConfig
from .synthetic import SynthConfig

MODEL_KEYS = ("h1", "h2", "dropout", "activation", "ln_eps", "t_max")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # architecture overrides on top of the dataset's feature manifest
    model: dict = field(default_factory=dict)
    variant: str = "m4"
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    protocol: str = "b"
    explain_limit: int = 8

    def __post_init__(self):
        self.variant = self.variant.lower()
        self.variants = [v.lower() for v in self.variants]
        bad = [v for v in [self.variant, *self.variants] if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {bad}; expected {VARIANTS}")
        if self.protocol not in ("a", "b"):
            raise ConfigError(f"protocol must be 'a' or 'b', got {self.protocol!r}")
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}; allowed: {MODEL_KEYS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        d["train"]["betas"] = list(self.train.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            return cls(synth=SynthConfig.from_dict(d.pop("synth", {})),
                       train=_build(TrainConfig, d.pop("train", {})),
                       eval=_build(EvalConfig, d.pop("eval", {})),
                       **d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _build(cls, d: dict):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def parse_value(text: str):
    """JSON literal if it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: Iterable[str]) -> dict:
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(raw)
    return d


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    base = RunConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        base = _merge(base, user)
    return RunConfig.from_dict(apply_overrides(base, overrides))


def _merge(base: dict, user: dict) -> dict:
    # section-level merge only: a dict value inside a section (e.g. synth.utterances) replaces the default
    out = copy.deepcopy(base)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "model":
            out[k].update(copy.deepcopy(v))
        else:
            out[k] = copy.deepcopy(v)
    return out
