"""
Acceptance suite: one test per headline criterion, each recording a single
PASS/FAIL line (shown at the end of the pytest run, or on stdout when this
file is executed directly).

Run alone with ``pytest tests/test_acceptance.py -v`` (about 10 minutes on one core).
"""

import itertools
import json
import sys
import time

import numpy as np
import pytest
from scipy.stats import rankdata

from aspect_attn.attention import m1_attention, m2_fixed_attention, aspect_attention
from aspect_attn.cli import main as cli_main
from aspect_attn.encoder import AspectFeatureSet
from aspect_attn.model import Model, ModelConfig
from aspect_attn.protocol import (SPLIT_MONO, EvalConfig, TrainConfig, make_folds, model_config_for, prepare,
                              run_protocol_a, run_protocol_b, segment_recording, train_on)
from aspect_attn.stats import auc_score, wilcoxon_signed_rank
from aspect_attn.synthetic import SynthConfig, generate
from aspect_attn.tensor import Rng, Tensor, no_grad
from aspect_attn.verify import run_gradient_suite

RESULTS: list[str] = []


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)


def _loglog_fit(ts, mags):
    lt, lm = np.log(ts), np.log(mags)
    slope, icept = np.polyfit(lt, lm, 1)
    resid = lm - (slope * lt + icept)
    return slope, 1.0 - resid @ resid / np.sum((lm - lm.mean()) ** 2)


class TestGradients:
    def test_gradient_suite_100_seeds_under_a_minute(self):
        res = run_gradient_suite(range(100), tol=1e-4)
        worst = max(res.worst.values())
        ok = res.passed and res.seconds < 60.0
        record("gradient suite", ok, f"{len(res.rows)} checks over 100 seeds, worst rel err {worst:.2e} "
                                     f"(< 1e-4), {res.seconds:.1f}s (< 60s)")
        assert ok, res.summary()


class TestConvexity:
    def test_scores_normalised_and_outputs_in_hull(self):
        g = np.random.default_rng(2024)
        names = ["articulation", "glottal", "phonation", "prosody"]
        worst_row, worst_hull = 0.0, -np.inf
        start = time.perf_counter()
        for i in range(1000):
            D = int(g.integers(2, 9))
            counts = [int(c) for c in g.integers(1, 5, 4)]
            cfg = ModelConfig(d=D, aspects=list(zip(names, counts)), h1=int(g.integers(2, 6)),
                              h2=int(g.integers(2, 6)), seed=i)
            model = Model(cfg)
            ssl = g.normal(0, float(g.uniform(0.1, 10)), size=(int(g.integers(1, 30)), D))
            fs = AspectFeatureSet(names, [g.normal(size=c) * 5 for c in counts])
            with no_grad():
                out = model.forward(ssl, fs)
                z, w = aspect_attention(Tensor(ssl), out.tokens, model.heads["aspect"])
            tok = out.tokens.tokens.data
            worst_row = max(worst_row, float(np.abs(w.array.sum(axis=1) - 1).max()))
            lo, hi = tok.min(axis=0), tok.max(axis=0)
            # positive means outside the componentwise hull of the tokens
            worst_hull = max(worst_hull, float(np.max(np.maximum(lo - z.data, z.data - hi))),
                             float(np.max(np.maximum(lo - out.pooled.data, out.pooled.data - hi))))
        secs = time.perf_counter() - start
        ok = worst_row <= 1e-9 and worst_hull <= 1e-12
        record("convexity/normalisation", ok, f"1000 inputs, max |row sum - 1| = {worst_row:.1e}, "
                                              f"max hull violation = {max(worst_hull, 0):.1e}, {secs:.1f}s")
        assert ok


class TestFlawWitnesses:
    TS = (50, 100, 200, 400)
    D, F, DRAWS = 16, 35, 8

    def _magnitudes(self, fn, variant, seed):
        g = np.random.default_rng(seed)
        model = Model(ModelConfig(variant=variant, d=self.D, seed=seed))
        mu, x = g.normal(size=self.D), g.normal(size=self.F)
        mags = []
        for T in self.TS:
            vals = []
            for _ in range(self.DRAWS):
                z, _ = fn(Tensor(mu + g.normal(size=(T, self.D))), Tensor(x), model.heads["temporal"], "temporal")
                vals.append(np.linalg.norm(z.data))
            mags.append(np.mean(vals))
        return np.array(mags)

    def test_m1_temporal_magnitude_linear_in_t(self):
        fits = [_loglog_fit(self.TS, self._magnitudes(m1_attention, "m1", s)) for s in range(5)]
        ok = all(abs(s - 1) <= 0.1 and r2 > 0.95 for s, r2 in fits)
        record("flaw witness: M1 magnitude ~ T", ok,
               "slopes " + ", ".join(f"{s:.3f}" for s, _ in fits) + "; R2 min " + f"{min(r for _, r in fits):.4f}")
        assert ok

    def test_m1_transposed_rows_not_normalised(self):
        g = np.random.default_rng(7)
        devs = []
        for i in range(200):
            model = Model(ModelConfig(variant="m1", d=self.D, seed=i))
            T = int(g.integers(5, 100))
            _, w = m1_attention(Tensor(g.normal(size=(T, self.D))), Tensor(g.normal(size=self.F)),
                                model.heads["temporal"], "temporal")
            devs.append(np.abs(w.array.T.sum(axis=1) - 1).max())
        ok = min(devs) > 0.1
        record("flaw witness: M1 transposed rows", ok, f"min over 200 inputs of max |row sum - 1| = {min(devs):.3f} (> 0.1)")
        assert ok

    def test_m2_magnitude_stable_when_t_doubles(self):
        ratios = np.concatenate([m[1:] / m[:-1] for m in (self._magnitudes(m2_fixed_attention, "m2", s)
                                                          for s in range(5))])
        ok = bool(np.all((ratios >= 0.8) & (ratios <= 1.25)))
        record("flaw witness: M2 doubling ratio", ok, f"ratios in [{ratios.min():.3f}, {ratios.max():.3f}] (within [0.8, 1.25])")
        assert ok


@pytest.mark.slow
class TestPlantedAspect:
    def test_informative_aspect_gets_the_attention(self):
        cfg = SynthConfig(n_speakers=40, utterances={"ddk": 2, "sentences": 2}, signal_strength=10.0,
                          couple_ssl=True, informative_aspect=0, seed=0)
        ds = generate(cfg)
        plan = make_folds(ds, 5, 4, 0)
        train_spk, test_spk = plan.outer[0]
        fit_spk, val_spk = plan.inner[0][0]
        K = cfg.K
        start, hits, rows = time.perf_counter(), 0, []
        for seed in range(5):
            mcfg = model_config_for(ds, "m4", seed)
            model, stats, _ = train_on(ds, fit_spk, val_spk, mcfg, TrainConfig(lr=1e-3, epochs=20), Rng(seed))
            batch = prepare(ds, [s for s in ds.samples if s.speaker_id in set(test_spk)], stats)
            with no_grad():
                means = np.mean([model.forward(x, fs).score.array.mean(axis=0) for x, fs, _ in batch], axis=0)
            inf = means[cfg.informative_aspect]
            others = np.delete(means, cfg.informative_aspect)
            hit = inf > 1 / K + 0.15 and bool(np.all(inf > others))
            hits += hit
            rows.append(f"{inf:.3f}")
        secs = time.perf_counter() - start
        ok = hits >= 4 and secs < 600
        record("planted-aspect recovery", ok, f"{hits}/5 seeds (need 4), informative-aspect mean "
                                              f"{', '.join(rows)} vs threshold {1 / K + 0.15:.2f}, {secs:.0f}s")
        assert ok


@pytest.mark.slow
class TestAblationOrder:
    def test_m3_le_m4_le_m2_plus_margin(self):
        # features clearly informative (Bayes 0.93), SSL only weakly so (linear probe ~0.87)
        cfg = SynthConfig(n_speakers=40, utterances={"ddk": 2, "sentences": 2, "monologue": 1},
                          task_t_range={"monologue": (60, 100)}, signal_strength=3.0, ssl_signal=0.6, seed=1)
        ds = generate(cfg)
        rep = run_protocol_b(ds, ["m2", "m3", "m4"], TrainConfig(lr=3e-3, epochs=40),
                             EvalConfig(seeds=[0, 1, 2, 3, 4], jobs=None))
        f1 = {v: rep.aggregates[v][rep.task_sets[0]]["f1"]["mean"] for v in ("m2", "m3", "m4")}
        ok = f1["m3"] <= f1["m4"] <= f1["m2"] + 0.03
        record("ablation order", ok, f"F1 means over 5 seeds: M2 {f1['m2']:.3f}, M3 {f1['m3']:.3f}, "
                                     f"M4 {f1['m4']:.3f} (need M3 <= M4 <= M2 + 0.03)")
        assert ok


class TestSplitMono:
    def test_segments_and_protocol_row(self, tiny_dataset):
        x = np.arange(103 * 3, dtype=float).reshape(103, 3)
        segs = segment_recording(x, 10)
        lengths = [len(s) for s in segs]
        cover = np.array_equal(np.concatenate(segs), x)
        rep = run_protocol_a(tiny_dataset, "m4", TrainConfig(lr=1e-3, epochs=1),
                             EvalConfig(n_outer=3, n_inner=2, seeds=[0], jobs=1))
        has_row = SPLIT_MONO in rep.task_sets and rep.aggregates["m4"][SPLIT_MONO]["f1"]["mean"] is not None
        ok = cover and max(lengths) - min(lengths) <= 1 and sum(lengths) == 103 and has_row
        record("split-mono mechanics", ok, f"T=103 -> lengths {lengths}; protocol A rows {rep.task_sets}")
        assert ok


def _pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def _enumerated_p(d):
    ranks = np.rint(2 * rankdata(np.abs(d))).astype(int)
    obs = int(ranks[d > 0].sum())
    sums = np.array([sum(r for r, b in zip(ranks, bits) if b) for bits in itertools.product((0, 1), repeat=len(d))])
    return min(1.0, 2 * min(int((sums <= obs).sum()), int((sums >= obs).sum())) / 2 ** len(d))


class TestStatisticsOracles:
    def test_auc_and_wilcoxon(self):
        g = np.random.default_rng(99)
        auc_bad = 0
        for i in range(1000):
            n = int(g.integers(2, 60))
            y = g.integers(0, 2, n)
            y[0], y[1] = 0, 1
            s = g.integers(0, 10, n) / 9.0 if i % 2 else g.normal(size=n)
            auc_bad += auc_score(s, y) != _pairwise_auc(s, y)
        exact_bad, exact_n = 0, 0
        for n in range(5, 13):
            for _ in range(10):
                d = g.integers(-5, 6, n).astype(float) if n % 2 else g.normal(size=n)
                d = d[d != 0]
                if d.size < 5:
                    continue
                exact_n += 1
                exact_bad += wilcoxon_signed_rank(d, 0 * d, "exact").pvalue != _enumerated_p(d)
        gap = max(abs(wilcoxon_signed_rank(d, 0 * d, "approx").pvalue - wilcoxon_signed_rank(d, 0 * d, "exact").pvalue)
                  for d in (g.normal(size=20) + g.uniform(-0.5, 0.5) for _ in range(500)))
        ok = auc_bad == 0 and exact_bad == 0 and gap < 0.01
        record("statistics oracles", ok, f"AUC mismatches {auc_bad}/1000; exact-p mismatches {exact_bad}/{exact_n} "
                                         f"(n = 5..12); max |approx - exact| at n=20: {gap:.4f} (< 0.01)")
        assert ok


class TestReproducibility:
    def test_ablate_twice_byte_identical(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "synth": {"n_speakers": 6, "utterances": {"ddk": 1, "sentences": 1, "monologue": 1},
                      "task_t_range": {"monologue": [30, 40]}, "d": 8, "h1": 8, "h2": 8, "seed": 5},
            "train": {"epochs": 2, "lr": 0.001},
            "eval": {"seeds": [0, 1], "n_outer": 3, "n_inner": 2}}))
        assert cli_main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
        reports = []
        for run, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
            assert cli_main(["ablate", "--config", str(cfg), "--data", str(tmp_path / "data"), "--jobs", jobs,
                             "--out", str(tmp_path / run)]) == 0
            reports.append((tmp_path / run / "report.json").read_bytes())
        ok = reports[0] == reports[1] == reports[2]
        record("ablate reproducibility", ok, f"3 runs (jobs 1, 1, 2), report.json {len(reports[0])} bytes, "
                                             f"{'identical' if ok else 'DIFFERENT'}")
        assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
