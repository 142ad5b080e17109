"""
Synthetic PD/HC corpora with a planted, known source of label signal.

Features: every feature is ``loc + scale * z`` with ``z ~ N(0, noise_std^2)``.
For the informative aspect only, ``z`` is shifted by ``+-signal_strength/2``
along a fixed unit direction (+ for PD, - for HC), so the Bayes accuracy of
that aspect alone is ``Phi(signal_strength / (2 * noise_std))`` and every
other aspect is label-free.

SSL sequences: a shared mean vector, a few slow sinusoidal components in a
random low-rank subspace, and white per-frame noise; none of this depends on
the label. With ``couple_ssl`` an additional constant shift of
``+-ssl_signal/2`` along a direction of that subspace is added, which gives
the attention queries access to the label.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (TASKS, Dataset, FeatureManifest, Sample, save_manifest,
                   write_ssl_embeddings)
from .encoder import DEFAULT_ASPECTS, AspectFeatureSet
from .errors import ConfigError
from .tensor import Rng


@dataclass
class SynthConfig:
    n_speakers: int = 40  # per class
    utterances: dict[str, int] = field(default_factory=lambda: {
        "vowels": 2, "words": 2, "ddk": 2, "sentences": 2, "read": 1, "monologue": 1})
    t_range: tuple[int, int] = (20, 40)
    task_t_range: dict[str, tuple[int, int]] = field(default_factory=lambda: {
        "read": (60, 100), "monologue": (100, 200)})
    d: int = 16
    aspects: list[str] = field(default_factory=lambda: list(DEFAULT_ASPECTS))
    feature_counts: list[int] = field(default_factory=lambda: [9, 9, 9, 8])
    informative_aspect: int = 0
    signal_strength: float = 10.0
    noise_std: float = 1.0
    speaker_std: float = 0.0
    couple_ssl: bool = True
    ssl_signal: float = 1.0
    ssl_rank: int = 4
    ssl_noise_std: float = 1.0
    ssl_mean_scale: float = 1.0
    h1: int = 32
    h2: int = 64
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.t_range = tuple(int(t) for t in self.t_range)
        self.task_t_range = {k: tuple(int(t) for t in v) for k, v in self.task_t_range.items()}
        self.validate()

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise ConfigError("need at least 2 speakers per class")
        if len(self.aspects) != len(self.feature_counts) or not self.aspects:
            raise ConfigError("aspects and feature_counts must align and be non-empty")
        if len(set(self.aspects)) != len(self.aspects):
            raise ConfigError(f"aspect names must be unique: {self.aspects}")
        if any(c < 1 for c in self.feature_counts):
            raise ConfigError("every aspect needs at least one feature")
        if not 0 <= self.informative_aspect < len(self.aspects):
            raise ConfigError(f"informative_aspect must lie in [0, {len(self.aspects)})")
        unknown = set(self.utterances) - set(TASKS)
        if unknown or not self.utterances or any(n < 0 for n in self.utterances.values()):
            raise ConfigError(f"utterances must map known tasks {TASKS} to counts; bad: {sorted(unknown)}")
        for lo, hi in [self.t_range, *self.task_t_range.values()]:
            if not 1 <= lo <= hi:
                raise ConfigError(f"T range must satisfy 1 <= low <= high, got {(lo, hi)}")
        if self.signal_strength < 0 or self.noise_std <= 0 or self.speaker_std < 0:
            raise ConfigError("signal_strength >= 0, noise_std > 0 and speaker_std >= 0 are required")
        if self.d < 1 or not 1 <= self.ssl_rank <= self.d:
            raise ConfigError("need d >= 1 and 1 <= ssl_rank <= d")

    @property
    def K(self) -> int:
        return len(self.aspects)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_range"] = list(self.t_range)
        d["task_t_range"] = {k: list(v) for k, v in self.task_t_range.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def bayes_accuracy(cfg: SynthConfig) -> float:
    """Best achievable accuracy from the informative aspect's features."""
    sigma = math.hypot(cfg.noise_std, cfg.speaker_std)
    return 0.5 * math.erfc(-(cfg.signal_strength / (2 * sigma)) / math.sqrt(2))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate(cfg: SynthConfig, out_dir=None) -> Dataset:
    """
    Build a dataset; when ``out_dir`` is given also write ``dataset.jsonl``,
    ``features.json``, ``synth_config.json`` and ``ssl/*.emb`` there.
    """
    cfg.validate()
    rng = Rng(cfg.seed)
    g = rng.spawn(0)
    F = sum(cfg.feature_counts)
    loc = g.normal(F, 2.0)
    scl = g.uniform(0.5, 2.0, F)
    bounds = np.cumsum([0] + list(cfg.feature_counts))
    inf_dir = _unit(g.normal(cfg.feature_counts[cfg.informative_aspect]))
    mu_ssl = g.normal(cfg.d, cfg.ssl_mean_scale)
    basis, _ = np.linalg.qr(g.normal((cfg.d, cfg.ssl_rank)))
    ssl_dir = basis @ _unit(g.normal(cfg.ssl_rank))
    amp = g.uniform(0.5, 1.5, cfg.ssl_rank)

    manifest = FeatureManifest(
        [(a, [f"{a}_{i:02d}" for i in range(c)]) for a, c in zip(cfg.aspects, cfg.feature_counts)],
        D=cfg.d, H1=cfg.h1, H2=cfg.h2, dropout=cfg.dropout)

    root = Path(out_dir) if out_dir is not None else Path(".")
    if out_dir is not None:
        (root / "ssl").mkdir(parents=True, exist_ok=True)

    samples: list[Sample] = []
    tasks = [t for t in TASKS if cfg.utterances.get(t, 0) > 0]
    for label in ("PD", "HC"):
        sign = 1.0 if label == "PD" else -1.0
        for s in range(cfg.n_speakers):
            spk = f"{label}{s:03d}"
            srng = rng.spawn(1, 0 if label == "HC" else 1, s)
            offset = srng.normal(F, cfg.speaker_std) if cfg.speaker_std > 0 else np.zeros(F)
            for task in tasks:
                for u in range(cfg.utterances[task]):
                    uid = f"{spk}_{task}_{u:02d}"
                    z = srng.normal(F, cfg.noise_std) + offset
                    a, b = bounds[cfg.informative_aspect], bounds[cfg.informative_aspect + 1]
                    z[a:b] += sign * 0.5 * cfg.signal_strength * inf_dir
                    raw = loc + scl * z
                    fs = AspectFeatureSet(list(cfg.aspects), [raw[bounds[k]:bounds[k + 1]] for k in range(cfg.K)])

                    lo, hi = cfg.task_t_range.get(task, cfg.t_range)
                    T = int(srng.integers(lo, hi + 1))
                    t = np.arange(T)[:, None] / T
                    freq = srng.uniform(0.5, 3.0, cfg.ssl_rank)
                    phase = srng.uniform(0.0, 2 * np.pi, cfg.ssl_rank)
                    latent = np.sin(2 * np.pi * freq * t + phase) * amp
                    x = mu_ssl + latent @ basis.T + srng.normal((T, cfg.d), cfg.ssl_noise_std)
                    if cfg.couple_ssl:
                        x = x + sign * 0.5 * cfg.ssl_signal * ssl_dir
                    x32 = x.astype(np.float32)
                    rel = f"ssl/{uid}.emb"
                    if out_dir is not None:
                        write_ssl_embeddings(root / rel, x32)
                    samples.append(Sample(uid, spk, task, rel, fs, label, ssl=x32.astype(np.float64)))

    if out_dir is not None:
        save_manifest(samples, root / "dataset.jsonl")
        manifest.save(root / "features.json")
        (root / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return Dataset(samples, manifest, root)


@dataclass
class PlantReport:
    accuracies: dict[str, float]
    informative: str
    best: str
    designed_margin: float

    @property
    def margin(self) -> float:
        others = [v for k, v in self.accuracies.items() if k != self.informative]
        return self.accuracies[self.informative] - max(others, default=0.5)

    @property
    def matches(self) -> bool:
        """True when the named aspect is the most decodable one by at least the designed margin."""
        return self.best == self.informative and self.margin >= self.designed_margin

    def to_dict(self) -> dict:
        return {"accuracies": self.accuracies, "informative": self.informative, "best": self.best,
                "margin": self.margin, "designed_margin": self.designed_margin, "matches": self.matches}


def _lda_probe(xtr, ytr, xte, yte) -> float:
    m1, m0 = xtr[ytr == 1].mean(axis=0), xtr[ytr == 0].mean(axis=0)
    centered = np.concatenate([xtr[ytr == 1] - m1, xtr[ytr == 0] - m0])
    cov = centered.T @ centered / max(len(xtr) - 2, 1) + 1e-6 * np.eye(xtr.shape[1])
    w = np.linalg.solve(cov, m1 - m0)
    c = w @ (m1 + m0) / 2
    return float(np.mean((xte @ w > c) == (yte == 1)))


def plant_check(dataset: Dataset, informative_aspect, cfg: SynthConfig | None = None, seed: int = 0) -> PlantReport:
    """
    Fit a linear discriminant probe per aspect on half of the speakers and
    score it on the other half.
    """
    names = dataset.manifest.aspect_names
    inf = names[informative_aspect] if isinstance(informative_aspect, (int, np.integer)) else str(informative_aspect)
    if inf not in names:
        raise ConfigError(f"unknown aspect {inf!r}")
    labels = dataset.speaker_labels()
    rng = Rng(seed).spawn(7)
    train_spk: set[str] = set()
    for cls in ("PD", "HC"):
        spk = sorted(s for s, l in labels.items() if l == cls)
        order = rng.permutation(len(spk))
        train_spk.update(spk[i] for i in order[: len(spk) // 2])
    tr = [s for s in dataset.samples if s.speaker_id in train_spk]
    te = [s for s in dataset.samples if s.speaker_id not in train_spk]
    ytr = np.array([s.y for s in tr])
    yte = np.array([s.y for s in te])
    acc = {}
    for k, name in enumerate(names):
        xtr = np.stack([s.features.values[k] for s in tr])
        xte = np.stack([s.features.values[k] for s in te])
        acc[name] = _lda_probe(xtr, ytr, xte, yte)
    best = max(names, key=lambda n: (acc[n], -names.index(n)))
    designed = 0.5 * (bayes_accuracy(cfg) - 0.5) if cfg is not None else 0.0
    return PlantReport(acc, inf, best, designed)
