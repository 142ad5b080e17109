"""
Per-aspect feature encoders.

Each speech aspect (articulation, glottal, phonation, prosody by default) owns
a private stack of three linear layers, each followed by LayerNorm, an
optional activation and dropout. No parameter is shared between aspects, so
token ``k`` depends only on aspect ``k``'s features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError
from .tensor import Rng, Tensor, dropout, layer_norm, linear, relu, stack

DEFAULT_ASPECTS = ("articulation", "glottal", "phonation", "prosody")
ACTIVATIONS = ("none", "relu")


@dataclass
class AspectFeatureSet:
    """Raw interpretable features of one utterance, grouped by aspect."""

    names: list[str]
    values: list[np.ndarray]

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        self.values = [np.asarray(v, dtype=np.float64).reshape(-1) for v in self.values]
        if not self.names:
            raise ConfigError("an AspectFeatureSet needs at least one aspect")
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"aspect names must be unique: {self.names}")
        if len(self.names) != len(self.values):
            raise ConfigError("names and values must align")

    @classmethod
    def from_mapping(cls, d: Mapping[str, Iterable[float]], order: Sequence[str] | None = None) -> "AspectFeatureSet":
        order = list(order) if order is not None else list(d)
        missing = [n for n in order if n not in d]
        if missing:
            raise ConfigError(f"features missing for aspects {missing}")
        return cls(order, [np.asarray(list(d[n]), dtype=np.float64) for n in order])

    def to_mapping(self) -> dict[str, list[float]]:
        return {n: v.tolist() for n, v in zip(self.names, self.values)}

    @property
    def counts(self) -> list[int]:
        return [v.size for v in self.values]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def concatenated(self) -> np.ndarray:
        return np.concatenate(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def permuted(self, order: Sequence[int]) -> "AspectFeatureSet":
        return AspectFeatureSet([self.names[i] for i in order], [self.values[i] for i in order])


@dataclass
class AspectEncoderParams:
    """Weights of one aspect's encoder: three (linear, LayerNorm) blocks."""

    name: str
    weights: list[Tensor]
    biases: list[Tensor]
    gammas: list[Tensor]
    betas: list[Tensor]
    dropout: float = 0.1
    activation: str = "none"
    eps: float = 1e-5

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b, g, be) in enumerate(zip(self.weights, self.biases, self.gammas, self.betas), start=1):
            out[f"enc.{self.name}.w{i}"] = w
            out[f"enc.{self.name}.b{i}"] = b
            out[f"enc.{self.name}.ln{i}.gamma"] = g
            out[f"enc.{self.name}.ln{i}.beta"] = be
        return out


def init_encoder(name: str, n_features: int, h1: int, h2: int, d: int, rng: Rng,
                 dropout_rate: float = 0.1, activation: str = "none", eps: float = 1e-5) -> AspectEncoderParams:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, unit gamma, zero beta."""
    if activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    if min(n_features, h1, h2, d) < 1:
        raise ConfigError(f"encoder extents must be positive: {(n_features, h1, h2, d)}")
    dims = [n_features, h1, h2, d]
    ws, bs, gs, bes = [], [], [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
        bs.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True))
        gs.append(Tensor(np.ones(fan_out), requires_grad=True))
        bes.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return AspectEncoderParams(name, ws, bs, gs, bes, dropout_rate, activation, eps)


def encode_aspect(features, params: AspectEncoderParams, rng: Rng | None, training: bool) -> Tensor:
    """Map one aspect's raw features to a D-dimensional token."""
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64).reshape(-1))
    if x.ndim != 1 or x.shape[0] != params.in_features:
        raise ShapeError(f"aspect {params.name!r}: expected {params.in_features} features, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"aspect {params.name!r}: features contain non-finite values")
    last = len(params.weights) - 1
    h = x
    for i, (w, b, g, be) in enumerate(zip(params.weights, params.biases, params.gammas, params.betas)):
        h = layer_norm(linear(h, w, b), g, be, params.eps)
        if params.activation == "relu" and i < last:
            h = relu(h)
        h = dropout(h, params.dropout, rng, training)
    return h


@dataclass
class AspectTokenMatrix:
    """K x D stack of aspect tokens with the aspect name of every row."""

    tokens: Tensor
    aspect_names: list[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.tokens.shape[0]

    @property
    def D(self) -> int:
        return self.tokens.shape[1]


def encode_all(fs: AspectFeatureSet, encoders: Sequence[AspectEncoderParams], rng: Rng | None,
               training: bool) -> AspectTokenMatrix:
    """Encode every aspect with its own encoder and stack the tokens in aspect order."""
    if len(fs.names) != len(encoders):
        raise ConfigError(f"{len(fs.names)} aspect groups but {len(encoders)} encoders")
    for name, enc in zip(fs.names, encoders):
        if name != enc.name:
            raise ConfigError(f"aspect order mismatch: features {name!r} vs encoder {enc.name!r}")
    tokens = [encode_aspect(v, enc, rng, training) for v, enc in zip(fs.values, encoders)]
    return AspectTokenMatrix(stack(tokens), list(fs.names))


@dataclass
class FeatureStats:
    """
    Per-feature mean and standard deviation, tagged with the speakers they
    were estimated from so that test-set leakage can be detected.
    """

    names: list[str]
    mean: list[np.ndarray]
    std: list[np.ndarray]
    speakers: frozenset[str] = frozenset()

    @classmethod
    def fit(cls, sets: Sequence[AspectFeatureSet], speakers: Iterable[str] = ()) -> "FeatureStats":
        if not sets:
            raise ConfigError("cannot fit feature statistics on zero samples")
        names = sets[0].names
        means, stds = [], []
        for k, name in enumerate(names):
            col = np.stack([fs.values[k] for fs in sets])
            means.append(col.mean(axis=0))
            stds.append(col.std(axis=0))
        return cls(list(names), means, stds, frozenset(speakers))

    def to_dict(self) -> dict:
        return {"names": self.names, "mean": [m.tolist() for m in self.mean],
                "std": [s.tolist() for s in self.std], "speakers": sorted(self.speakers)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(list(d["names"]), [np.asarray(m, dtype=np.float64) for m in d["mean"]],
                   [np.asarray(s, dtype=np.float64) for s in d["std"]], frozenset(d.get("speakers", ())))


def normalize_features(fs: AspectFeatureSet, stats: FeatureStats) -> AspectFeatureSet:
    """Z-score every feature; features with std below 1e-12 map to 0."""
    if fs.names != stats.names or fs.counts != [m.size for m in stats.mean]:
        raise ConfigError(
            f"feature layout {list(zip(fs.names, fs.counts))} does not match statistics "
            f"{list(zip(stats.names, [m.size for m in stats.mean]))}")
    out = []
    for v, m, s in zip(fs.values, stats.mean, stats.std):
        safe = np.where(s < 1e-12, 1.0, s)
        out.append(np.where(s < 1e-12, 0.0, (v - m) / safe))
    return AspectFeatureSet(list(fs.names), out)
