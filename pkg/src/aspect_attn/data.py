"""
On-disk formats and the in-memory dataset.

Embedding container (``.emb``)::

    offset  size  field
    0       8     magic  b"ASPEMB\\0\\0"
    8       4     u32 format version (1)
    12      4     u32 reserved (0)
    16      4     u32 T  (frames)
    20      4     u32 D  (channels)
    24      4*T*D little-endian float32, row-major

Dataset manifest: JSON lines, one utterance per line with keys
``utterance_id, speaker_id, task, ssl_path, features, label``. ``ssl_path`` is
relative to the manifest's directory; ``features`` maps aspect name to a
list of floats; ``label`` is ``"PD"`` or ``"HC"``.

Feature manifest (``features.json``)::

    {"aspects": [{"name": ..., "feature_names": [...]}, ...],
     "D": 1024, "H1": 128, "H2": 512, "dropout": 0.1}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import AspectFeatureSet
from .errors import ConfigError, DataFormatError
from .model import LABELS

EMB_MAGIC = b"ASPEMB\x00\x00"
EMB_VERSION = 1
EMB_HEADER = struct.Struct("<8sIIII")
TASKS = ("vowels", "words", "ddk", "sentences", "read", "monologue")


def write_ssl_embeddings(path, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 2 or 0 in x.shape:
        raise DataFormatError(f"embeddings must be a non-empty T x D matrix, got shape {x.shape}")
    T, D = x.shape
    Path(path).write_bytes(EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, 0, T, D) + x.astype("<f4").tobytes())


def load_ssl_embeddings(path, expected_dim: int | None = None) -> np.ndarray:
    """Read a ``T x D`` float32 container into a float64 array."""
    buf = Path(path).read_bytes()
    if len(buf) < EMB_HEADER.size:
        raise DataFormatError(f"{path}: header truncated at byte offset {len(buf)} "
                              f"(need {EMB_HEADER.size} bytes)")
    magic, version, _, T, D = EMB_HEADER.unpack_from(buf)
    if magic != EMB_MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte offset 0")
    if version != EMB_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte offset 8")
    if T == 0 or D == 0:
        raise DataFormatError(f"{path}: empty extents T={T}, D={D} at byte offset 16")
    need = EMB_HEADER.size + 4 * T * D
    if len(buf) != need:
        raise DataFormatError(f"{path}: payload {'truncated' if len(buf) < need else 'overlong'} "
                              f"at byte offset {min(len(buf), need)} (expected {need} bytes, got {len(buf)})")
    if expected_dim is not None and D != expected_dim:
        raise ConfigError(f"{path}: embedding dimension {D} does not match model D={expected_dim}")
    return np.frombuffer(buf, dtype="<f4", offset=EMB_HEADER.size).reshape(T, D).astype(np.float64)


@dataclass
class FeatureManifest:
    aspects: list[tuple[str, list[str]]]
    D: int = 1024
    H1: int = 128
    H2: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        names = [n for n, _ in self.aspects]
        if not names or len(set(names)) != len(names):
            raise ConfigError(f"aspect names must be unique and non-empty: {names}")
        total = sum(len(f) for _, f in self.aspects)
        for n, f in self.aspects:
            if not 1 <= len(f) <= total:
                raise ConfigError(f"aspect {n!r} must list between 1 and {total} features")

    @property
    def aspect_counts(self) -> list[tuple[str, int]]:
        return [(n, len(f)) for n, f in self.aspects]

    @property
    def aspect_names(self) -> list[str]:
        return [n for n, _ in self.aspects]

    def to_dict(self) -> dict:
        return {"aspects": [{"name": n, "feature_names": list(f)} for n, f in self.aspects],
                "D": self.D, "H1": self.H1, "H2": self.H2, "dropout": self.dropout}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureManifest":
        try:
            aspects = [(a["name"], list(a["feature_names"])) for a in d["aspects"]]
            return cls(aspects, int(d.get("D", 1024)), int(d.get("H1", 128)), int(d.get("H2", 512)),
                       float(d.get("dropout", 0.1)))
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"malformed feature manifest: {e!r}") from e

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureManifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: invalid JSON: {e}") from e


@dataclass
class Sample:
    utterance_id: str
    speaker_id: str
    task: str
    ssl_path: str
    features: AspectFeatureSet
    label: str
    ssl: np.ndarray | None = field(default=None, repr=False)
    source_id: str | None = None  # original recording for derived (segmented) samples

    @property
    def y(self) -> int:
        return LABELS.index(self.label)

    def to_record(self) -> dict:
        return {"utterance_id": self.utterance_id, "speaker_id": self.speaker_id, "task": self.task,
                "ssl_path": self.ssl_path, "features": self.features.to_mapping(), "label": self.label}


@dataclass
class Dataset:
    samples: list[Sample]
    manifest: FeatureManifest
    root: Path = Path(".")

    def __post_init__(self):
        labels_by_speaker: dict[str, str] = {}
        seen: set[str] = set()
        for s in self.samples:
            if s.utterance_id in seen:
                raise DataFormatError(f"duplicate utterance id {s.utterance_id!r}")
            seen.add(s.utterance_id)
            if s.label not in LABELS:
                raise DataFormatError(f"{s.utterance_id}: label must be one of {LABELS}, got {s.label!r}")
            prev = labels_by_speaker.setdefault(s.speaker_id, s.label)
            if prev != s.label:
                raise DataFormatError(f"speaker {s.speaker_id} has inconsistent labels")
            if s.features.names != self.manifest.aspect_names or \
                    s.features.counts != [c for _, c in self.manifest.aspect_counts]:
                raise DataFormatError(f"{s.utterance_id}: features do not match the feature manifest")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def speakers(self) -> list[str]:
        return sorted({s.speaker_id for s in self.samples})

    def speaker_labels(self) -> dict[str, str]:
        return {s.speaker_id: s.label for s in self.samples}

    @property
    def tasks(self) -> list[str]:
        return sorted({s.task for s in self.samples})

    def subset(self, tasks: Iterable[str] | None = None, speakers: Iterable[str] | None = None) -> "Dataset":
        tasks = None if tasks is None else set(tasks)
        speakers = None if speakers is None else set(speakers)
        keep = [s for s in self.samples
                if (tasks is None or s.task in tasks) and (speakers is None or s.speaker_id in speakers)]
        return Dataset(keep, self.manifest, self.root)

    def load_ssl(self, sample: Sample) -> np.ndarray:
        if sample.ssl is None:
            sample.ssl = load_ssl_embeddings(self.root / sample.ssl_path, self.manifest.D)
        return sample.ssl

    def preload(self) -> "Dataset":
        for s in self.samples:
            self.load_ssl(s)
        return self


def save_manifest(samples: Sequence[Sample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def load_dataset(path, feature_manifest=None) -> Dataset:
    """Load a JSON-lines dataset manifest (and ``features.json`` beside it by default)."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.jsonl"
    if not path.exists():
        raise FileNotFoundError(path)
    manifest = FeatureManifest.load(feature_manifest or path.parent / "features.json")
    order = manifest.aspect_names
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            samples.append(Sample(str(r["utterance_id"]), str(r["speaker_id"]), str(r["task"]),
                                  str(r["ssl_path"]), AspectFeatureSet.from_mapping(r["features"], order),
                                  str(r["label"])))
        except (json.JSONDecodeError, KeyError, ConfigError) as e:
            raise DataFormatError(f"{path}:{lineno}: {e}") from e
    return Dataset(samples, manifest, path.parent)
