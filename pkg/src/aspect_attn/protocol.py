"""
Training loop and the two evaluation protocols.

Protocol A trains and tests every task on its own (F1 only, one row per task
plus a Split-Mono row). Protocol B pools a set of tasks and reports six
metrics per variant with Wilcoxon significance marks against the preceding
variant (the first variant is compared with the last).

Both use speaker-independent nested cross-validation: the outer folds give
the test speakers; the first inner fold of the remaining speakers is held out
to choose the best epoch. Feature normalisation statistics are fitted on the
speakers the model is actually trained on and carry those speaker ids, which
are checked against the test speakers before any prediction is made.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import TASKS, Dataset, Sample
from .encoder import FeatureStats, normalize_features
from .errors import ConfigError, DomainError, AspectAttnError
from .model import Adam, Model, ModelConfig, backward_step, batch_loss
from .stats import METRICS, compute_metrics, wilcoxon_signed_rank
from .tensor import Rng, no_grad

log = logging.getLogger(__name__)

SPLIT_MONO = "split-mono"
PAIRINGS = ("fold", "fold_mean", "seed")


class LeakageError(AspectAttnError):
    """Test-fold speakers contributed to training or normalisation."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    select_best: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr >= 0, batch_size >= 1 and epochs >= 0 are required")


@dataclass
class EvalConfig:
    n_outer: int = 5
    n_inner: int = 4
    fold_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    tasks: list[str] | None = None
    split_mono: bool = True
    n_segments: int = 10
    combined_tasks: list[str] = field(default_factory=lambda: ["ddk", "sentences", "monologue"])
    threshold: float = 0.5
    pairing: str = "fold"
    alpha: float = 0.05
    jobs: int | None = None

    def __post_init__(self):
        if self.pairing not in PAIRINGS:
            raise ConfigError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        if self.n_outer < 2 or self.n_inner < 2:
            raise ConfigError("n_outer and n_inner must be at least 2")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


# ---------------------------------------------------------------------------
# folds and segmentation
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    outer: list[tuple[list[str], list[str]]]              # (train speakers, test speakers)
    inner: list[list[tuple[list[str], list[str]]]]        # per outer fold

    def to_dict(self) -> dict:
        return asdict(self)


def _deal(speaker_labels: dict[str, str], n_folds: int, rng: Rng) -> list[list[str]]:
    """Shuffle each class and deal its speakers round-robin, continuing across classes."""
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    slot = 0
    for cls in ("PD", "HC"):
        spk = sorted(s for s, l in speaker_labels.items() if l == cls)
        for i in rng.permutation(len(spk)):
            folds[slot % n_folds].append(spk[i])
            slot += 1
    return [sorted(f) for f in folds]


def make_folds(dataset: Dataset | dict[str, str], n_outer: int = 5, n_inner: int = 4, seed: int = 0) -> FoldPlan:
    """Speaker-level, class-stratified nested folds; deterministic in ``seed``."""
    labels = dataset.speaker_labels() if isinstance(dataset, Dataset) else dict(dataset)
    per_class = {c: sum(1 for l in labels.values() if l == c) for c in ("PD", "HC")}
    if min(per_class.values()) < 2:
        raise ConfigError(f"need at least 2 speakers per class, got {per_class}")
    if len(labels) < n_outer:
        raise ConfigError(f"{len(labels)} speakers cannot fill {n_outer} outer folds")
    rng = Rng(seed).spawn(11)
    outer_test = _deal(labels, n_outer, rng)
    outer, inner = [], []
    for i, test in enumerate(outer_test):
        train = sorted(s for s in labels if s not in set(test))
        outer.append((train, test))
        sub = {s: labels[s] for s in train}
        k = min(n_inner, len(train))
        inner_test = _deal(sub, k, rng.spawn(i))
        inner.append([(sorted(s for s in train if s not in set(t)), t) for t in inner_test])
    return FoldPlan(outer, inner)


def segment_recording(ssl, n_segments: int = 10) -> list[np.ndarray]:
    """
    Cut a ``T x D`` sequence into ``n_segments`` contiguous pieces whose lengths
    differ by at most one (the longer pieces come first).
    """
    x = np.asarray(getattr(ssl, "data", ssl))
    T = x.shape[0]
    if n_segments < 1:
        raise DomainError("n_segments must be positive")
    if T < n_segments:
        raise DomainError(f"cannot cut {T} frames into {n_segments} segments")
    base, extra = divmod(T, n_segments)
    out, start = [], 0
    for i in range(n_segments):
        n = base + (1 if i < extra else 0)
        out.append(x[start:start + n])
        start += n
    return out


def split_mono(dataset: Dataset, n_segments: int = 10) -> Dataset:
    """Replace each monologue recording by its segments (features are inherited)."""
    out = []
    for s in dataset.samples:
        if s.task != "monologue":
            continue
        for i, seg in enumerate(segment_recording(dataset.load_ssl(s), n_segments)):
            out.append(Sample(f"{s.utterance_id}_seg{i:02d}", s.speaker_id, SPLIT_MONO, s.ssl_path,
                              s.features, s.label, ssl=seg, source_id=s.utterance_id))
    return Dataset(out, dataset.manifest, dataset.root)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def model_config_for(dataset: Dataset, variant: str, seed: int = 0, **overrides) -> ModelConfig:
    m = dataset.manifest
    kw = dict(variant=variant, d=m.D, aspects=m.aspect_counts, h1=m.H1, h2=m.H2, dropout=m.dropout, seed=seed)
    kw.update(overrides)
    return ModelConfig(**kw)


def prepare(dataset: Dataset, samples: Sequence[Sample], stats: FeatureStats):
    return [(dataset.load_ssl(s), normalize_features(s.features, stats), s.y) for s in samples]


def predict(model: Model, batch) -> np.ndarray:
    with no_grad():
        return np.array([model.forward(ssl, fs, None, False).prob_pd for ssl, fs, _ in batch])


def eval_loss(model: Model, batch) -> float:
    with no_grad():
        return batch_loss(model, batch, None, training=False).item()


def fit(model: Model, train, val, tcfg: TrainConfig, rng: Rng) -> list[dict]:
    """
    Adam on mini-batches of ``tcfg.batch_size`` utterances. With a validation
    set and ``select_best`` the parameters of the epoch with the lowest
    validation loss are restored at the end.
    """
    params = model.named_parameters()
    opt = Adam(params, tcfg.lr, tcfg.betas, tcfg.eps)
    shuffle_rng, drop_rng = rng.spawn(1), rng.spawn(2)
    history, best, best_loss = [], None, np.inf
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for i in range(0, len(train), tcfg.batch_size):
            batch = [train[j] for j in order[i:i + tcfg.batch_size]]
            losses.append(backward_step(model, batch, opt, drop_rng))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val:
            rec["val_loss"] = eval_loss(model, val)
            if tcfg.select_best and rec["val_loss"] < best_loss:
                best_loss = rec["val_loss"]
                best = {k: p.data.copy() for k, p in params.items()}
        history.append(rec)
    if best is not None:
        for k, p in params.items():
            p.data[...] = best[k]
    return history


def train_on(dataset: Dataset, train_speakers, val_speakers, cfg: ModelConfig, tcfg: TrainConfig,
             rng: Rng) -> tuple[Model, FeatureStats, list[dict]]:
    """Fit normalisation statistics and a model on ``train_speakers``."""
    train_s = [s for s in dataset.samples if s.speaker_id in set(train_speakers)]
    val_s = [s for s in dataset.samples if s.speaker_id in set(val_speakers)]
    if not train_s:
        raise ConfigError("no training samples")
    stats = FeatureStats.fit([s.features for s in train_s], train_speakers)
    model = Model(cfg, rng.spawn(0))
    hist = fit(model, prepare(dataset, train_s, stats), prepare(dataset, val_s, stats), tcfg, rng)
    return model, stats, hist


def run_fold(dataset: Dataset, plan: FoldPlan, fold: int, variant: str, seed: int,
             tcfg: TrainConfig, ecfg: EvalConfig, model_overrides: dict | None = None) -> dict:
    """Train on one outer fold's training speakers and score its test speakers."""
    train_spk, test_spk = plan.outer[fold]
    if tcfg.select_best:
        fit_spk, val_spk = plan.inner[fold][0]
    else:
        fit_spk, val_spk = train_spk, []
    cfg = model_config_for(dataset, variant, seed, **(model_overrides or {}))
    model, stats, _ = train_on(dataset, fit_spk, val_spk, cfg, tcfg, Rng(seed).spawn(3, fold))
    leaked = stats.speakers & set(test_spk)
    if leaked:
        raise LeakageError(f"test speakers {sorted(leaked)} were used for normalisation")
    test_s = [s for s in dataset.samples if s.speaker_id in set(test_spk)]
    batch = prepare(dataset, test_s, stats)
    probs = predict(model, batch)
    labels = np.array([y for _, _, y in batch])
    return {"variant": variant, "seed": seed, "fold": fold, "n_test": len(batch),
            "metrics": compute_metrics(probs, labels, ecfg.threshold)}


# ---------------------------------------------------------------------------
# job execution
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(datasets, plans, tcfg, ecfg, overrides):
    _WORKER.update(datasets=datasets, plans=plans, tcfg=tcfg, ecfg=ecfg, overrides=overrides)


def _run_job(job):
    task_set, variant, seed, fold = job
    w = _WORKER
    rec = run_fold(w["datasets"][task_set], w["plans"][task_set], fold, variant, seed,
                   w["tcfg"], w["ecfg"], w["overrides"])
    rec["task_set"] = task_set
    return rec


def _execute(jobs, datasets, plans, tcfg, ecfg, overrides) -> list[dict]:
    n = ecfg.jobs or os.cpu_count() or 1
    args = (datasets, plans, tcfg, ecfg, overrides)
    if n <= 1 or len(jobs) <= 1:
        _init_worker(*args)
        try:
            return [_run_job(j) for j in jobs]
        finally:
            _WORKER.clear()
    with ProcessPoolExecutor(max_workers=min(n, len(jobs)), initializer=_init_worker, initargs=args) as ex:
        return list(ex.map(_run_job, jobs))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    protocol: str
    variants: list[str]
    task_sets: list[str]
    seeds: list[int]
    metrics: list[str]
    records: list[dict]
    aggregates: dict = field(default_factory=dict)
    comparisons: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def values(self, variant: str, task_set: str, metric: str, pairing: str = "fold") -> list[float | None]:
        """Per-unit metric values in a fixed (seed, fold) order."""
        recs = sorted((r for r in self.records if r["variant"] == variant and r["task_set"] == task_set),
                      key=lambda r: (r["seed"], r["fold"]))
        if pairing == "fold":
            return [r["metrics"][metric] for r in recs]
        key = "fold" if pairing == "fold_mean" else "seed"
        groups: dict[int, list[float]] = {}
        for r in recs:
            if r["metrics"][metric] is not None:
                groups.setdefault(r[key], []).append(r["metrics"][metric])
        return [float(np.mean(groups[k])) for k in sorted(groups)]

    def star(self, variant: str, task_set: str, metric: str) -> bool:
        return any(c["star"] for c in self.comparisons
                   if c["variant"] == variant and c["task_set"] == task_set and c["metric"] == metric)

    def to_table(self) -> str:
        """Aligned text table: mean +- std (in %) per variant/task and metric."""
        rows = [["variant", "task"] + list(self.metrics)]
        for v in self.variants:
            for t in self.task_sets:
                row = [v.upper(), t]
                for m in self.metrics:
                    a = self.aggregates.get(v, {}).get(t, {}).get(m)
                    if a is None or a["mean"] is None:
                        row.append("n/a")
                    else:
                        row.append(f"{100 * a['mean']:.1f}±{100 * a['std']:.1f}" + ("*" if self.star(v, t, m) else ""))
                rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def aggregate(records: list[dict], variants, task_sets, seeds, metrics) -> dict:
    """
    Mean and std (population) of every metric across folds for each seed,
    then the average of those means and stds across seeds.
    """
    out: dict = {}
    for v in variants:
        for t in task_sets:
            for m in metrics:
                per_seed_mean, per_seed_std = [], []
                for s in seeds:
                    vals = [r["metrics"][m] for r in records
                            if r["variant"] == v and r["task_set"] == t and r["seed"] == s
                            and r["metrics"][m] is not None]
                    if vals:
                        per_seed_mean.append(float(np.mean(vals)))
                        per_seed_std.append(float(np.std(vals)))
                out.setdefault(v, {}).setdefault(t, {})[m] = {
                    "mean": float(np.mean(per_seed_mean)) if per_seed_mean else None,
                    "std": float(np.mean(per_seed_std)) if per_seed_std else None,
                    "per_seed_mean": per_seed_mean,
                    "per_seed_std": per_seed_std,
                }
    return out


def compare(report: EvalReport, pairing: str = "fold", alpha: float = 0.05) -> list[dict]:
    """Wilcoxon test of each variant against the preceding one (the first against the last)."""
    out = []
    vs = report.variants
    if len(vs) < 2:
        return out
    for i, v in enumerate(vs):
        ref = vs[i - 1]
        for t in report.task_sets:
            for m in report.metrics:
                a = report.values(v, t, m, pairing)
                b = report.values(ref, t, m, pairing)
                pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
                entry = {"variant": v, "reference": ref, "task_set": t, "metric": m,
                         "n": None, "statistic": None, "p": None, "star": False}
                try:
                    res = wilcoxon_signed_rank([x for x, _ in pairs], [y for _, y in pairs])
                    entry.update(n=res.n, statistic=res.statistic, p=res.pvalue, star=bool(res.pvalue < alpha))
                except DomainError as e:
                    entry["note"] = str(e)
                out.append(entry)
    return out


def _report_config(tcfg: TrainConfig, ecfg: EvalConfig, overrides) -> dict:
    return {"train": asdict(tcfg), "eval": {k: v for k, v in asdict(ecfg).items() if k != "jobs"},
            "model_overrides": dict(overrides or {})}


def _order_tasks(tasks) -> list[str]:
    rank = {t: i for i, t in enumerate(TASKS + (SPLIT_MONO,))}
    return sorted(tasks, key=lambda t: rank.get(t, len(rank)))


def run_protocol_a(dataset: Dataset, variant: str = "m4", tcfg: TrainConfig | None = None,
                   ecfg: EvalConfig | None = None, model_overrides: dict | None = None) -> EvalReport:
    """Per-task evaluation (F1), including a Split-Mono row when monologues are present."""
    tcfg = tcfg or TrainConfig()
    ecfg = ecfg or EvalConfig()
    tasks = list(ecfg.tasks) if ecfg.tasks is not None else list(dataset.tasks)
    if ecfg.split_mono and "monologue" in dataset.tasks and SPLIT_MONO not in tasks \
            and (ecfg.tasks is None or "monologue" in tasks):
        tasks.append(SPLIT_MONO)
    tasks = _order_tasks(tasks)
    if not tasks:
        raise ConfigError("no tasks to evaluate")
    datasets, plans = {}, {}
    for t in tasks:
        sub = split_mono(dataset, ecfg.n_segments) if t == SPLIT_MONO else dataset.subset([t])
        if len(sub) == 0:
            raise ConfigError(f"task {t!r} has no samples")
        datasets[t] = sub.preload()
        plans[t] = make_folds(sub, ecfg.n_outer, ecfg.n_inner, ecfg.fold_seed)
    jobs = [(t, variant, s, f) for t in tasks for s in ecfg.seeds for f in range(ecfg.n_outer)]
    records = _execute(jobs, datasets, plans, tcfg, ecfg, model_overrides)
    for r in records:
        r["metrics"] = {"f1": r["metrics"]["f1"]}
    report = EvalReport("a", [variant], tasks, list(ecfg.seeds), ["f1"], records,
                        config=_report_config(tcfg, ecfg, model_overrides))
    report.aggregates = aggregate(records, report.variants, tasks, report.seeds, ["f1"])
    return report


def run_protocol_b(dataset: Dataset, variants: Sequence[str] = ("m1", "m2", "m3", "m4"),
                   tcfg: TrainConfig | None = None, ecfg: EvalConfig | None = None,
                   model_overrides: dict | None = None) -> EvalReport:
    """Combined-task evaluation with six metrics and Wilcoxon marks."""
    tcfg = tcfg or TrainConfig()
    ecfg = ecfg or EvalConfig()
    variants = [v.lower() for v in variants]
    if not variants:
        raise ConfigError("at least one variant is required")
    name = "+".join(ecfg.combined_tasks)
    sub = dataset.subset(ecfg.combined_tasks)
    if len(sub) == 0:
        raise ConfigError(f"no samples for tasks {ecfg.combined_tasks}")
    sub.preload()
    plan = make_folds(sub, ecfg.n_outer, ecfg.n_inner, ecfg.fold_seed)
    jobs = [(name, v, s, f) for v in variants for s in ecfg.seeds for f in range(ecfg.n_outer)]
    records = _execute(jobs, {name: sub}, {name: plan}, tcfg, ecfg, model_overrides)
    report = EvalReport("b", variants, [name], list(ecfg.seeds), list(METRICS), records,
                        config=_report_config(tcfg, ecfg, model_overrides))
    report.aggregates = aggregate(records, variants, [name], report.seeds, METRICS)
    report.comparisons = compare(report, ecfg.pairing, ecfg.alpha)
    return report
