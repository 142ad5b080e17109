import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from aspect_attn.encoder import AspectFeatureSet
from aspect_attn.errors import ConfigError, DataFormatError, ShapeError
from aspect_attn.explain import (ExplanationRecord, cohort_summary, explain, export_csv, export_json, read_csv,
                             read_json, render_bar_svg, render_heatmap_svg, score_color, summarize)
from aspect_attn.model import Model, ModelConfig

SVG = "{http://www.w3.org/2000/svg}"
NAMES = ["articulation", "glottal", "phonation", "prosody"]


def _softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@pytest.fixture
def records(gen):
    out = []
    for i, lab in enumerate(["PD", "HC", "PD"]):
        out.append(ExplanationRecord(f"utt{i}", NAMES, _softmax_rows(gen.normal(size=(5 + i, 4))),
                                     "PD", lab, 0.7))
    return out


def _rgb(hexcolor):
    return [int(hexcolor[i:i + 2], 16) for i in (1, 3, 5)]


class TestRecord:
    def test_rows_must_be_distributions(self):
        with pytest.raises(ShapeError):
            ExplanationRecord("u", NAMES, np.full((2, 4), 0.3), "PD")
        with pytest.raises(ShapeError):
            ExplanationRecord("u", NAMES, np.ones((2, 3)) / 3, "PD")

    def test_summarize_ties_go_to_first(self):
        rec = ExplanationRecord("u", NAMES, np.array([[0.4, 0.4, 0.1, 0.1]]), "HC")
        means, top = summarize(rec)
        assert top == 0 and means.tolist() == [0.4, 0.4, 0.1, 0.1]

    def test_cohort_summary(self, records):
        s = cohort_summary(records)
        assert s["all"]["n"] == 3 and s["PD"]["n"] == 2 and s["HC"]["n"] == 1
        expected = np.mean([r.mean_scores for r in records], axis=0)
        np.testing.assert_allclose(s["all"]["mean_scores"], expected)
        assert s["all"]["dominant"] == NAMES[int(np.argmax(expected))]


class TestExport:
    def test_csv_round_trip_is_exact(self, tmp_path, records):
        export_csv(records, tmp_path / "e.csv")
        back = read_csv(tmp_path / "e.csv")
        assert [r.utterance_id for r in back] == [r.utterance_id for r in records]
        for a, b in zip(back, records):
            assert np.array_equal(a.scores, b.scores)
            assert (a.prediction, a.label) == (b.prediction, b.label)

    def test_csv_layout(self, tmp_path, records):
        export_csv(records, tmp_path / "e.csv")
        with open(tmp_path / "e.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["utterance_id", "t", *NAMES, "prediction", "label"]
        assert len(rows) == 1 + sum(r.scores.shape[0] for r in records)

    def test_csv_rejects_mixed_aspects(self, tmp_path, records):
        odd = ExplanationRecord("x", ["a", "b", "c", "d"], records[0].scores, "PD")
        with pytest.raises(ConfigError):
            export_csv(records + [odd], tmp_path / "e.csv")

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "bad.csv").write_text("id,frame\n")
        with pytest.raises(DataFormatError):
            read_csv(tmp_path / "bad.csv")

    def test_json_round_trip(self, tmp_path, records):
        export_json(records, tmp_path / "e.json")
        back = read_json(tmp_path / "e.json")
        for a, b in zip(back, records):
            assert np.array_equal(a.scores, b.scores) and a.prob_pd == b.prob_pd

    def test_unwritable_path(self, tmp_path, records):
        with pytest.raises(OSError, match="cannot write"):
            export_json(records, tmp_path / "missing_dir" / "e.json")


class TestSvg:
    def test_heatmap_structure(self, tmp_path, records):
        render_heatmap_svg(records[1], tmp_path / "h.svg")
        root = ET.parse(tmp_path / "h.svg").getroot()
        assert root.tag == SVG + "svg"
        cells = [e for e in root.iter(SVG + "rect") if e.get("class") == "cell"]
        T, K = records[1].scores.shape
        assert len(cells) == T * K
        for c in cells:
            t, k = int(c.get("data-t")), int(c.get("data-k"))
            assert c.get("fill") == score_color(records[1].scores[t, k])
        texts = [e.text for e in root.iter(SVG + "text")]
        assert all(n in texts for n in NAMES)
        assert {"0.0", "0.5", "1.0"} <= set(texts)

    def test_escapes_markup_in_ids(self, tmp_path):
        rec = ExplanationRecord("a<b>&c", NAMES, np.full((1, 4), 0.25), "HC")
        render_heatmap_svg(rec, tmp_path / "h.svg")
        ET.parse(tmp_path / "h.svg")

    def test_bar_chart(self, tmp_path, records):
        render_bar_svg(records[0], tmp_path / "b.svg")
        root = ET.parse(tmp_path / "b.svg").getroot()
        bars = [e for e in root.iter(SVG + "rect") if e.get("class") == "bar"]
        widths = [float(b.get("width")) for b in bars]
        assert np.argmax(widths) == np.argmax(records[0].mean_scores)

    def test_colour_scale_monotone(self):
        vals = np.linspace(0, 1, 101)
        channels = np.array([_rgb(score_color(v)) for v in vals])
        assert np.all(np.diff(channels, axis=0) <= 0)  # every channel darkens with the score
        assert score_color(0.0) == "#ffffff"
        assert score_color(-1) == score_color(0) and score_color(2) == score_color(1)


class TestFromModel:
    def test_explain_matches_forward(self, gen):
        cfg = ModelConfig(d=5, aspects=[(n, 2) for n in NAMES], h1=3, h2=4)
        model = Model(cfg)
        batch = [(gen.normal(size=(6, 5)), AspectFeatureSet(NAMES, [gen.normal(size=2) for _ in NAMES]), 1)]
        rec = explain(model, batch, ["u0"], ["PD"])[0]
        out = model.forward(*batch[0][:2])
        np.testing.assert_array_equal(rec.scores, out.score.array)
        assert rec.prob_pd == out.prob_pd
        assert rec.prediction == ("PD" if out.prob_pd >= 0.5 else "HC")

    def test_needs_aspect_variant(self):
        cfg = ModelConfig(variant="m2", d=5, aspects=[(n, 2) for n in NAMES], h1=3, h2=4)
        with pytest.raises(ConfigError):
            explain(Model(cfg), [], [])
