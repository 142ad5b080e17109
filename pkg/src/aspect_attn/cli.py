"""
Command-line entry point.

Subcommands: ``synth``, ``train``, ``eval``, ``ablate``, ``explain``,
``gradcheck``. Each writes its outputs plus ``resolved_config.json`` into
``--out`` (default ``$ASPECT_ATTN_OUT/<subcommand>`` or ``runs/<subcommand>``).

Exit codes
----------
0  success
1  unexpected internal error
2  usage error (unknown flag, bad flag value)
3  a referenced input file does not exist
4  configuration failed validation
5  an input file is malformed
6  numerical failure or failed verification (e.g. gradcheck)

Failures print one JSON object ``{"error", "message", "exit_code"}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import load_dataset
from .encoder import FeatureStats
from .errors import ConfigError, DataFormatError, NonFiniteError, ShapeError
from .explain import cohort_summary, explain, export_csv, export_json, render_bar_svg, render_heatmap_svg
from .model import load_params, save_params
from .protocol import (EvalReport, aggregate, compare, make_folds, model_config_for, predict, prepare,
                       run_protocol_a, run_protocol_b, train_on)
from .stats import compute_metrics
from .synthetic import generate, plant_check
from .tensor import Rng

log = logging.getLogger("aspect_attn")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = range(7)


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-4"`` (inclusive) or a mix of both."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=0.001 (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seeds", type=parse_seeds, help="seed list, e.g. 0,1,2 or 0-4")
    common.add_argument("--jobs", type=int, help="parallel worker processes (default: logical cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    def data_args(p, checkpoint=False):
        p.add_argument("--data", required=True, help="dataset directory or dataset.jsonl")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")
            p.add_argument("--stats", help="feature_stats.json (default: next to the checkpoint)")

    variant = dict(choices=["m1", "m2", "m3", "m4"], type=str.lower)
    parser = _Parser(prog="aspect-attn", description="Explainable aspect cross-attention for PD speech classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train one model on a dataset")
    data_args(p)
    p.add_argument("--variant", **variant)

    p = sub.add_parser("eval", parents=[common], help="run an evaluation protocol, or score a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="score this checkpoint instead of running a protocol")
    p.add_argument("--stats")
    p.add_argument("--variant", **variant)
    p.add_argument("--protocol", choices=["a", "b"], type=str.lower)

    p = sub.add_parser("ablate", parents=[common], help="run M1-M4 under one protocol with Wilcoxon marks")
    data_args(p)
    p.add_argument("--protocol", choices=["a", "b"], type=str.lower)
    p.add_argument("--variant", **variant, help=argparse.SUPPRESS)

    p = sub.add_parser("explain", parents=[common], help="export aspect scores and figures for an M4 checkpoint")
    data_args(p, checkpoint=True)
    p.add_argument("--limit", type=int, help="number of per-utterance heatmaps")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--variant", **variant, help="restrict model checks to one variant")
    return parser


def resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "variant", None):
        overrides.append(f"variant={json.dumps(args.variant)}")
    if getattr(args, "protocol", None):
        overrides.append(f"protocol={json.dumps(args.protocol)}")
    if args.seeds:
        overrides.append(f"eval.seeds={json.dumps(args.seeds)}")
    if args.jobs is not None:
        overrides.append(f"eval.jobs={args.jobs}")
    if args.config and not Path(args.config).exists():
        raise FileNotFoundError(args.config)
    return load_config(args.config, overrides)


def out_dir(args) -> Path:
    base = args.out or os.path.join(os.environ.get("ASPECT_ATTN_OUT", "runs"), args.command)
    p = Path(base)
    p.mkdir(parents=True, exist_ok=True)
    return p


def archive(out: Path, args, cfg: RunConfig, argv) -> None:
    record = {"command": args.command, "argv": list(argv), "config": cfg.to_dict()}
    (out / "resolved_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    if args.seeds:
        cfg.synth.seed = args.seeds[0]
    ds = generate(cfg.synth, out)
    report = plant_check(ds, cfg.synth.informative_aspect, cfg.synth)
    (out / "plant_check.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({"samples": len(ds), "speakers": len(ds.speakers), "out": str(out), "plant_check": report.to_dict()})
    return EXIT_OK


def _load(path):
    ds = load_dataset(path)
    return ds


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    ds = _load(args.data)
    if cfg.eval.tasks is not None:
        ds = ds.subset(cfg.eval.tasks)
    seed = cfg.eval.seeds[0]
    if cfg.train.select_best:
        fit_spk, val_spk = make_folds(ds, cfg.eval.n_inner, 2, cfg.eval.fold_seed).outer[0]
    else:
        fit_spk, val_spk = ds.speakers, []
    mcfg = model_config_for(ds, cfg.variant, seed, **cfg.model)
    model, stats, hist = train_on(ds.preload(), fit_spk, val_spk, mcfg, cfg.train, Rng(seed))
    save_params(model, out / "model.ckpt")
    (out / "feature_stats.json").write_text(json.dumps(stats.to_dict()) + "\n")
    (out / "history.json").write_text(json.dumps(hist, indent=1) + "\n")
    _emit({"checkpoint": str(out / "model.ckpt"), "epochs": len(hist),
           "final": hist[-1] if hist else None, "validation_speakers": len(val_spk)})
    return EXIT_OK


def _stats_for(args) -> FeatureStats:
    path = Path(args.stats) if args.stats else Path(args.checkpoint).parent / "feature_stats.json"
    if not path.exists():
        raise FileNotFoundError(path)
    return FeatureStats.from_dict(json.loads(path.read_text()))


def _write_report(report: EvalReport, out: Path) -> None:
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.to_table())
    print(report.to_table(), end="")


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    ds = _load(args.data)
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(args.checkpoint)
        model = load_params(args.checkpoint)
        batch = prepare(ds, ds.samples, _stats_for(args))
        metrics = compute_metrics(predict(model, batch), [y for *_, y in batch], cfg.eval.threshold)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        _emit(metrics)
        return EXIT_OK
    if cfg.protocol == "a":
        report = run_protocol_a(ds, cfg.variant, cfg.train, cfg.eval, cfg.model)
    else:
        report = run_protocol_b(ds, [cfg.variant], cfg.train, cfg.eval, cfg.model)
    _write_report(report, out)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: Path) -> int:
    ds = _load(args.data)
    if cfg.protocol == "b":
        report = run_protocol_b(ds, cfg.variants, cfg.train, cfg.eval, cfg.model)
    else:
        parts = [run_protocol_a(ds, v, cfg.train, cfg.eval, cfg.model) for v in cfg.variants]
        records = [r for p in parts for r in p.records]
        first = parts[0]
        report = EvalReport("a", list(cfg.variants), first.task_sets, first.seeds, first.metrics, records,
                            config=first.config)
        report.aggregates = aggregate(records, report.variants, report.task_sets, report.seeds, report.metrics)
        report.comparisons = compare(report, cfg.eval.pairing, cfg.eval.alpha)
    _write_report(report, out)
    return EXIT_OK


def cmd_explain(args, cfg: RunConfig, out: Path) -> int:
    ds = _load(args.data)
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(args.checkpoint)
    model = load_params(args.checkpoint)
    batch = prepare(ds, ds.samples, _stats_for(args))
    records = explain(model, batch, [s.utterance_id for s in ds.samples], [s.label for s in ds.samples])
    export_csv(records, out / "explanations.csv", model.cfg.aspect_names)
    export_json(records, out / "explanations.json")
    summary = cohort_summary(records)
    (out / "cohort_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    render_bar_svg(summary["all"]["mean_scores"], out / "cohort_mean_scores.svg", summary["aspect_names"],
                   title="cohort mean aspect scores")
    fig_dir = out / "heatmaps"
    fig_dir.mkdir(exist_ok=True)
    limit = args.limit if args.limit is not None else cfg.explain_limit
    for r in records[:limit]:
        render_heatmap_svg(r, fig_dir / f"{r.utterance_id}.svg")
    _emit({"records": len(records), "heatmaps": min(limit, len(records)), "summary": summary})
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> int:
    from .verify import run_gradient_suite
    seeds = args.seeds or list(range(100))
    variants = (args.variant,) if args.variant else ("m1", "m2", "m3", "m4")
    res = run_gradient_suite(seeds, args.tol, variants)
    (out / "gradcheck.json").write_text(json.dumps(
        {"tol": res.tol, "passed": res.passed, "seconds": res.seconds, "worst": res.worst,
         "rows": [list(r) for r in res.rows]}, indent=1) + "\n")
    print(res.summary())
    if not res.passed:
        raise CheckFailed(f"gradient check failed (worst {max(res.worst.values()):.3e} >= {res.tol:g})")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "explain": cmd_explain, "gradcheck": cmd_gradcheck}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except argparse.ArgumentTypeError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = out_dir(args)
        archive(out, args, cfg, argv)
        return COMMANDS[args.command](args, cfg, out)
    except FileNotFoundError as e:
        return _fail("missing_file", str(e.filename or e), EXIT_MISSING)
    except (ConfigError, ShapeError) as e:
        return _fail("config", str(e), EXIT_CONFIG)
    except DataFormatError as e:
        return _fail("data_format", str(e), EXIT_DATA)
    except (NonFiniteError, CheckFailed) as e:
        return _fail("check_failed", str(e), EXIT_CHECK)
    except Exception as e:  # noqa: BLE001 - last-resort reporting for the CLI
        log.debug("internal error", exc_info=True)
        return _fail("internal", f"{type(e).__name__}: {e}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
