"""
End-to-end classifier: aspect encoders -> attention variant -> mean pooling
-> fully connected PD/HC head.

Parameters live in a flat ``{name: Tensor}`` mapping so that optimisers and
checkpoints can treat every variant the same way.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import (AttentionParams, ScoreMatrix, VARIANTS, m1_attention,
                        m2_fixed_attention, m3_interpretable_value_attention,
                        aspect_attention)
from .encoder import (DEFAULT_ASPECTS, AspectEncoderParams, AspectFeatureSet,
                      AspectTokenMatrix, encode_all, init_encoder)
from .errors import ConfigError, DataFormatError, NonFiniteError, ShapeError
from .tensor import (Rng, Tensor, concat, cross_entropy, linear, mean,
                     mean_pool_time, stack)

LABELS = ("HC", "PD")  # class index 1 is the positive (PD) class


@dataclass
class ModelConfig:
    """
    Architecture of one model.

    ``aspects`` lists ``(name, n_features)`` pairs in aspect order; ``d`` must
    equal the SSL embedding dimension.
    """

    variant: str = "m4"
    d: int = 1024
    aspects: list[tuple[str, int]] = field(
        default_factory=lambda: [(n, c) for n, c in zip(DEFAULT_ASPECTS, (9, 9, 9, 8))])
    h1: int = 128
    h2: int = 512
    dropout: float = 0.1
    activation: str = "none"
    ln_eps: float = 1e-5
    t_max: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.variant = str(self.variant).lower()
        self.aspects = [(str(n), int(c)) for n, c in self.aspects]
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d < 1 or self.h1 < 1 or self.h2 < 1:
            raise ConfigError("d, h1 and h2 must be positive")
        if not self.aspects:
            raise ConfigError("at least one aspect is required")
        names = [n for n, _ in self.aspects]
        if len(set(names)) != len(names):
            raise ConfigError(f"aspect names must be unique: {names}")
        if any(c < 1 for _, c in self.aspects):
            raise ConfigError(f"every aspect needs at least one feature: {self.aspects}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.t_max is not None and self.t_max < 1:
            raise ConfigError("t_max must be positive")

    @property
    def K(self) -> int:
        return len(self.aspects)

    @property
    def F(self) -> int:
        return sum(c for _, c in self.aspects)

    @property
    def aspect_names(self) -> list[str]:
        return [n for n, _ in self.aspects]

    @property
    def classifier_in(self) -> int:
        return {"m4": self.d, "m3": 2 * self.F}.get(self.variant, self.F + self.d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspects"] = [list(a) for a in self.aspects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> bytes:
        """SHA-256 of the architecture (everything but the seed)."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


@dataclass
class PredictionOutput:
    logits: Tensor
    probabilities: np.ndarray
    scores: dict[str, ScoreMatrix]
    pooled: Tensor
    tokens: AspectTokenMatrix | None = None

    @property
    def score(self) -> ScoreMatrix:
        return next(iter(self.scores.values()))

    @property
    def prob_pd(self) -> float:
        return float(self.probabilities[1])


class Model:
    """Parameter container plus forward pass for any of the four variants."""

    def __init__(self, cfg: ModelConfig, rng: Rng | None = None):
        self.cfg = cfg
        rng = rng or Rng(cfg.seed).spawn(0)
        D = cfg.d
        self.encoders: list[AspectEncoderParams] = []
        self.heads: dict[str, AttentionParams] = {}
        bound = 1.0 / np.sqrt(D)

        def square():
            return Tensor(rng.uniform(-bound, bound, (D, D)), requires_grad=True)

        if cfg.variant == "m4":
            for name, n in cfg.aspects:
                self.encoders.append(init_encoder(name, n, cfg.h1, cfg.h2, D, rng, cfg.dropout,
                                                  cfg.activation, cfg.ln_eps))
            self.heads["aspect"] = AttentionParams(w_q=square(), w_k=square(), w_v=None, d_k=D)
        else:
            for head in ("embedding", "temporal"):
                w_q = square()
                w_v = square() if cfg.variant in ("m1", "m2") else None
                self.heads[head] = AttentionParams(w_q=w_q, w_k=None, w_v=w_v)
        n_in = cfg.classifier_in
        b = 1.0 / np.sqrt(n_in)
        self.fc_w = Tensor(rng.uniform(-b, b, (n_in, 2)), requires_grad=True)
        self.fc_b = Tensor(rng.uniform(-b, b, (2,)), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for enc in self.encoders:
            out.update(enc.named_parameters())
        for head, p in self.heads.items():
            for attr in ("w_q", "w_k", "w_v"):
                t = getattr(p, attr)
                if t is not None:
                    out[f"attn.{head}.{attr}"] = t
        out["fc.w"] = self.fc_w
        out["fc.b"] = self.fc_b
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def _check_inputs(self, ssl, features: AspectFeatureSet) -> Tensor:
        ssl = ssl if isinstance(ssl, Tensor) else Tensor(ssl)
        cfg = self.cfg
        if ssl.ndim != 2 or ssl.shape[1] != cfg.d:
            raise ShapeError(f"SSL input must be T x {cfg.d}, got shape {ssl.shape}")
        if cfg.t_max is not None and ssl.shape[0] > cfg.t_max:
            raise ShapeError(f"sequence length {ssl.shape[0]} exceeds t_max={cfg.t_max}")
        layout = list(zip(features.names, features.counts))
        if layout != cfg.aspects:
            raise ConfigError(f"feature layout {layout} does not match model aspects {cfg.aspects}")
        return ssl

    def forward(self, ssl, features: AspectFeatureSet, rng: Rng | None = None,
                training: bool = False) -> PredictionOutput:
        ssl = self._check_inputs(ssl, features)
        v = self.cfg.variant
        tokens = None
        if v == "m4":
            tokens = encode_all(features, self.encoders, rng, training)
            z, w = aspect_attention(ssl, tokens, self.heads["aspect"])
            pooled = mean_pool_time(z)
            scores = {"aspect": w}
        else:
            informed = Tensor(features.concatenated())
            fn = {"m1": m1_attention, "m2": m2_fixed_attention, "m3": m3_interpretable_value_attention}[v]
            z_e, w_e = fn(ssl, informed, self.heads["embedding"], "embedding")
            z_t, w_t = fn(ssl, informed, self.heads["temporal"], "temporal")
            # M1/M2 embedding output is F x T: average over time. Every other
            # head output is (F x D | F x F): average over its F rows.
            pooled_e = mean(z_e, 1) if v in ("m1", "m2") else mean(z_e, 0)
            pooled = concat([pooled_e, mean(z_t, 0)])
            scores = {"embedding": w_e, "temporal": w_t}
        logits = linear(pooled, self.fc_w, self.fc_b)
        e = np.exp(logits.data - logits.data.max())
        return PredictionOutput(logits, e / e.sum(), scores, pooled, tokens)

    __call__ = forward

    def parameter_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(p.data)) for k, p in self.named_parameters().items()}


class Adam:
    """Adam with bias correction over a fixed parameter mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


Sample = tuple  # (ssl array T x D, AspectFeatureSet, label index)


def batch_loss(model: Model, batch: Sequence[Sample], rng: Rng | None, training: bool) -> Tensor:
    """Mean cross-entropy over per-utterance forward passes (no padding)."""
    if not batch:
        raise ShapeError("batch must not be empty")
    logits = [model.forward(ssl, fs, rng, training).logits for ssl, fs, _ in batch]
    return cross_entropy(stack(logits), [int(y) for _, _, y in batch])


def backward_step(model: Model, batch: Sequence[Sample], optimizer: Adam, rng: Rng | None,
                  lr: float | None = None) -> float:
    """One optimiser step on the batch's mean cross-entropy; returns the loss."""
    model.zero_grad()
    loss = batch_loss(model, batch, rng, training=True)
    value = loss.item()
    if not np.isfinite(value):
        norms = ", ".join(f"{k}={v:.3g}" for k, v in model.parameter_norms().items())
        raise NonFiniteError(f"non-finite loss {value}; parameter norms: {norms}")
    loss.backward()
    optimizer.step(lr)
    return value


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"ASPATTCK"
CKPT_VERSION = 1


def save_params(model: Model, path) -> None:
    """
    Binary checkpoint: magic, u32 version, 32-byte architecture hash, the
    JSON model config, then every parameter as (name, shape, float64 LE data).
    """
    cfg_bytes = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    params = model.named_parameters()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), model.cfg.fingerprint(),
             struct.pack("<I", len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(params))]
    for name, p in params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(p.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(f"{self.path}: truncated checkpoint at byte offset {self.pos} "
                                  f"(needed {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path, cfg: ModelConfig | None = None) -> Model:
    """
    Read a checkpoint. If ``cfg`` is given, its architecture must match the
    one stored in the file.
    """
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32)
    (n_cfg,) = r.unpack("<I")
    stored = ModelConfig.from_dict(json.loads(r.take(n_cfg).decode()))
    if stored.fingerprint() != digest:
        raise DataFormatError(f"{path}: config hash does not match embedded config")
    if cfg is not None and cfg.fingerprint() != digest:
        raise ConfigError(f"{path}: checkpoint architecture {stored.to_dict()} does not match "
                          f"requested {cfg.to_dict()}")
    model = Model(cfg or stored)
    params = model.named_parameters()
    (n_params,) = r.unpack("<I")
    if n_params != len(params):
        raise ConfigError(f"{path}: {n_params} parameters stored, model has {len(params)}")
    for _ in range(n_params):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name not in params or params[name].shape != tuple(shape):
            raise ConfigError(f"{path}: parameter {name} with shape {shape} does not fit the model")
        count = int(np.prod(shape)) if ndim else 1
        params[name].data[...] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
    if r.pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return model
