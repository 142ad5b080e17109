"""
Aspect-level explanations from the M4 attention weights: per-utterance score
traces, summaries, CSV/JSON export and static SVG figures.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .model import LABELS, Model

ROW_TOL = 1e-9
_LOW = np.array([255, 255, 255], dtype=float)   # score 0
_HIGH = np.array([8, 48, 107], dtype=float)     # score 1


@dataclass
class ExplanationRecord:
    utterance_id: str
    aspect_names: list[str]
    scores: np.ndarray          # T x K, rows sum to one
    prediction: str
    label: str | None = None
    prob_pd: float | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.aspect_names):
            raise ShapeError(f"scores {self.scores.shape} do not match {len(self.aspect_names)} aspects")
        if np.any(self.scores < 0) or np.max(np.abs(self.scores.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ShapeError(f"{self.utterance_id}: score rows must be probability vectors")

    @property
    def mean_scores(self) -> np.ndarray:
        return self.scores.mean(axis=0)

    def to_dict(self) -> dict:
        return {"utterance_id": self.utterance_id, "aspect_names": list(self.aspect_names),
                "scores": self.scores.tolist(), "mean_scores": self.mean_scores.tolist(),
                "prediction": self.prediction, "label": self.label, "prob_pd": self.prob_pd}

    @classmethod
    def from_dict(cls, d: dict) -> "ExplanationRecord":
        return cls(d["utterance_id"], list(d["aspect_names"]), np.array(d["scores"], dtype=np.float64),
                   d["prediction"], d.get("label"), d.get("prob_pd"))


def summarize(record: ExplanationRecord) -> tuple[np.ndarray, int]:
    """Column means and the dominant aspect (ties go to the lowest index)."""
    m = record.mean_scores
    return m, int(np.argmax(m))


def explain(model: Model, batch: Sequence[tuple], ids: Sequence[str], labels: Sequence[str | None] | None = None
            ) -> list[ExplanationRecord]:
    """Run the model in eval mode and collect one record per utterance."""
    if model.cfg.variant != "m4":
        raise ConfigError(f"aspect explanations need variant m4, not {model.cfg.variant}")
    from .tensor import no_grad
    out = []
    labels = labels if labels is not None else [None] * len(batch)
    with no_grad():
        for (ssl, fs, _), uid, lab in zip(batch, ids, labels):
            pred = model.forward(ssl, fs, None, False)
            out.append(ExplanationRecord(uid, list(model.cfg.aspect_names), pred.score.array.copy(),
                                         LABELS[int(pred.prob_pd >= 0.5)], lab, pred.prob_pd))
    return out


def cohort_summary(records: Iterable[ExplanationRecord]) -> dict:
    """Average of per-utterance mean scores, overall and per true label."""
    groups: dict[str, list[np.ndarray]] = {}
    names = None
    for r in records:
        names = names or r.aspect_names
        groups.setdefault("all", []).append(r.mean_scores)
        if r.label is not None:
            groups.setdefault(r.label, []).append(r.mean_scores)
    out = {"aspect_names": names or []}
    for k, v in groups.items():
        m = np.mean(v, axis=0)
        out[k] = {"n": len(v), "mean_scores": m.tolist(), "dominant": (names or [])[int(np.argmax(m))]}
    return out


# ---------------------------------------------------------------------------
# CSV / JSON
# ---------------------------------------------------------------------------


def _open_for_write(path):
    try:
        return open(path, "w", newline="")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def export_csv(records: Sequence[ExplanationRecord], path, aspect_names: Sequence[str] | None = None) -> None:
    """One row per (utterance, frame): ``utterance_id, t, <aspect...>, prediction, label``."""
    names = list(aspect_names) if aspect_names is not None else (records[0].aspect_names if records else [])
    with _open_for_write(path) as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "t", *names, "prediction", "label"])
        for r in records:
            if r.aspect_names != names:
                raise ConfigError(f"{r.utterance_id}: aspects {r.aspect_names} differ from header {names}")
            for t, row in enumerate(r.scores):
                w.writerow([r.utterance_id, t, *(repr(float(v)) for v in row), r.prediction,
                            "" if r.label is None else r.label])


def read_csv(path) -> list[ExplanationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["utterance_id", "t"] or rows[0][-2:] != ["prediction", "label"]:
        raise DataFormatError(f"{path}: unexpected header")
    names = rows[0][2:-2]
    grouped: dict[str, list] = {}
    for row in rows[1:]:
        grouped.setdefault(row[0], []).append(row)
    out = []
    for uid, rs in grouped.items():
        scores = np.array([[float(v) for v in r[2:-2]] for r in sorted(rs, key=lambda r: int(r[1]))])
        out.append(ExplanationRecord(uid, names, scores, rs[0][-2], rs[0][-1] or None))
    return out


def export_json(records: Sequence[ExplanationRecord], path) -> None:
    with _open_for_write(path) as fh:
        json.dump([r.to_dict() for r in records], fh, indent=1)
        fh.write("\n")


def read_json(path) -> list[ExplanationRecord]:
    return [ExplanationRecord.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------


def score_color(v: float) -> str:
    """Sequential white-to-navy colour; every channel is monotone in ``v``."""
    v = float(np.clip(v, 0.0, 1.0))
    rgb = np.rint(_LOW + (_HIGH - _LOW) * v).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _write_svg(path, width: int, height: int, body: list[str]) -> None:
    doc = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">', *body, "</svg>"]
    try:
        Path(path).write_text('<?xml version="1.0" encoding="UTF-8"?>\n' + "\n".join(doc) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def render_heatmap_svg(record: ExplanationRecord, path, cell_width: float | None = None) -> None:
    """Aspects as rows, frames as columns, with a 0..1 colour legend."""
    T, K = record.scores.shape
    left, top, row_h = 110, 40, 28
    cw = cell_width or max(2.0, min(24.0, 600.0 / T))
    grid_w = cw * T
    legend_x = left + grid_w + 30
    width = int(legend_x + 70)
    height = int(top + row_h * K + 50)
    title = f"{record.utterance_id}: predicted {record.prediction}"
    if record.label is not None:
        title += f" (label {record.label})"
    body = [f'<text x="{left}" y="20" font-weight="bold">{escape(title)}</text>']
    body.append('<g class="cells">')
    for k in range(K):
        for t in range(T):
            v = record.scores[t, k]
            body.append(f'<rect class="cell" x="{left + t * cw:.2f}" y="{top + k * row_h}" width="{cw:.2f}" '
                        f'height="{row_h}" fill="{score_color(v)}" data-t="{t}" data-k="{k}"/>')
    body.append("</g>")
    for k, name in enumerate(record.aspect_names):
        body.append(f'<text x="{left - 8}" y="{top + k * row_h + row_h / 2 + 4}" text-anchor="end">{escape(name)}</text>')
    body.append(f'<text x="{left + grid_w / 2:.1f}" y="{top + row_h * K + 30}" text-anchor="middle">frame</text>')
    # legend
    lh = row_h * K
    body.append('<defs><linearGradient id="legend" x1="0" y1="1" x2="0" y2="0">'
                f'<stop offset="0" stop-color="{score_color(0)}"/><stop offset="1" stop-color="{score_color(1)}"/>'
                '</linearGradient></defs>')
    body.append(f'<rect x="{legend_x:.1f}" y="{top}" width="14" height="{lh}" fill="url(#legend)" stroke="#444"/>')
    for v in (0.0, 0.5, 1.0):
        y = top + lh * (1 - v)
        body.append(f'<text x="{legend_x + 20:.1f}" y="{y + 4:.1f}">{v:.1f}</text>')
    _write_svg(path, width, height, body)


def render_bar_svg(record_or_scores, path, aspect_names: Sequence[str] | None = None, title: str = "") -> None:
    """Bar chart of mean aspect scores (one record or an explicit score vector)."""
    if isinstance(record_or_scores, ExplanationRecord):
        scores = record_or_scores.mean_scores
        names = record_or_scores.aspect_names
        title = title or record_or_scores.utterance_id
    else:
        scores = np.asarray(record_or_scores, dtype=float)
        names = list(aspect_names or [f"aspect{k}" for k in range(scores.size)])
    left, top, bar_h, gap, span = 110, 40, 22, 8, 300
    height = int(top + len(names) * (bar_h + gap) + 30)
    body = [f'<text x="{left}" y="20" font-weight="bold">{escape(title)}</text>']
    for k, (name, v) in enumerate(zip(names, scores)):
        y = top + k * (bar_h + gap)
        body.append(f'<rect class="bar" x="{left}" y="{y}" width="{span * float(v):.2f}" height="{bar_h}" '
                    f'fill="{score_color(v)}" stroke="#444"/>')
        body.append(f'<text x="{left - 8}" y="{y + bar_h / 2 + 4}" text-anchor="end">{escape(name)}</text>')
        body.append(f'<text x="{left + span * float(v) + 6:.2f}" y="{y + bar_h / 2 + 4}">{float(v):.3f}</text>')
    _write_svg(path, left + span + 80, height, body)
