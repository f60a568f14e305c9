from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from mh_eval.backends.mock import load_mock_rule
from mh_eval.config import ExperimentConfig, load_config
from mh_eval.errors import BackendError, ConfigError, DatasetError, MhEvalError, SplitError
from mh_eval.output.json_out import JsonPrinter
from mh_eval.output.table import TablePrinter
from mh_eval.services.corpus import write_split_manifest
from mh_eval.services.finetune_export import export_manifest, export_pairs, spec_from_config, verify_manifest
from mh_eval.services.reporting import FORMATS, LAYOUTS, render_report
from mh_eval.services.runner import plan_cells, run_dir_for, run_experiment, summarize_plan
from mh_eval.services.splits import load_splits, summarize

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_BACKEND = 4


def run() -> None:
    sys.exit(main())


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s")

    handlers = {
        "validate": _handle_validate,
        "plan": _handle_plan,
        "run": _handle_run,
        "report": _handle_report,
        "export-ft": _handle_export_ft,
        "stats": _handle_stats,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DatasetError, SplitError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except MhEvalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mh-eval",
        description="Evaluate LLMs on mental-health prediction tasks from social media text.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", required=True, type=Path, help="Experiment YAML file.")
        return p

    with_config(sub.add_parser("validate", help="Check a config and load its datasets."))
    with_config(sub.add_parser("plan", help="Preview the cells a run would score."))

    run_p = with_config(sub.add_parser("run", help="Run (or resume) an experiment."))
    run_p.add_argument("--mock", type=Path, default=None, help="Mock rule YAML; no network calls.")
    run_p.add_argument("--resume", action="store_true", help="Keep records from an earlier run of this config.")
    run_p.add_argument("--out", type=Path, default=None, help="Override output_dir.")
    run_p.add_argument("--no-progress", action="store_true", help="Hide the progress bar.")

    rep = sub.add_parser("report", help="Render tables from a run directory.")
    src = rep.add_mutually_exclusive_group(required=True)
    src.add_argument("--run-dir", type=Path, help="Run directory.")
    src.add_argument("--config", type=Path, help="Config whose run directory to read.")
    rep.add_argument("--out", type=Path, default=None, help="output_dir the run used, if overridden.")
    rep.add_argument("--layout", choices=LAYOUTS, default="summary")
    rep.add_argument("--format", choices=FORMATS, default="text")

    ft = with_config(sub.add_parser("export-ft", help="Write finetuning pairs and a trainer manifest."))
    ft.add_argument("--fraction", type=float, default=None, help="Train downsample fraction in (0, 1].")
    ft.add_argument("--out", type=Path, default=None, help="Directory for the pair files.")
    ft.add_argument("--verify", type=Path, default=None, help="Only re-check an existing manifest.")

    st = with_config(sub.add_parser("stats", help="Dataset statistics and majority baselines."))
    st.add_argument("--out", type=Path, default=None, help="Also write per-dataset split manifests here.")
    st.add_argument("--format", choices=["table", "json"], default="table")
    return parser


def _handle_validate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    splits = load_splits(cfg)
    print(f"OK: {cfg.name} ({len(cfg.datasets)} dataset(s), {len(cfg.models)} model(s)), digest {cfg.digest()[:12]}")
    for name, split in splits.items():
        print(f"  {name}: {len(split.train)} train / {len(split.test)} test")
    return EXIT_OK


def _handle_plan(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    cells = plan_cells(cfg, load_splits(cfg))
    rows = [
        [p.key.dataset, f"#{p.key.task}", p.key.model, p.key.mode, p.key.strategy, str(p.variants), str(p.repeats), str(p.records), str(p.cells)]
        for p in summarize_plan(cells)
    ]
    headers = ["dataset", "task", "model", "mode", "strategy", "variants", "repeats", "records", "cells"]
    TablePrinter().print(headers, rows, empty_message="Nothing to run.")
    print(f"total cells: {len(cells)}")
    return EXIT_OK


def _handle_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, output_dir=args.out)
    rule = load_mock_rule(args.mock) if args.mock else None
    result = run_experiment(cfg, mock_rule=rule, resume=args.resume, progress=not (args.no_progress or args.quiet))

    print(f"run directory: {result.run_dir}")
    print(f"cells: {result.completed}/{result.planned} ({result.resumed} resumed, {result.failed} failed)")
    if result.completed:
        print(render_report(result.run_dir, "summary"), end="")

    if result.aborted_models and set(result.aborted_models) >= {m.name for m in cfg.models}:
        print("every model lane aborted", file=sys.stderr)
        return EXIT_BACKEND
    if result.partial:
        if result.aborted_models:
            print(f"aborted lanes: {', '.join(result.aborted_models)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _handle_report(args: argparse.Namespace) -> int:
    run_dir = args.run_dir or run_dir_for(load_config(args.config, output_dir=args.out))
    print(render_report(run_dir, layout=args.layout, fmt=args.format), end="")
    return EXIT_OK


def _handle_export_ft(args: argparse.Namespace) -> int:
    if args.verify:
        manifest = verify_manifest(args.verify)
        print(f"OK: {', '.join(manifest.files)} match {args.verify}")
        return EXIT_OK

    cfg = load_config(args.config)
    spec = spec_from_config(cfg, fraction=args.fraction)
    out = args.out or _default_export_dir(cfg, spec.fraction)
    result = export_pairs(spec, load_splits(cfg), out)
    manifest = export_manifest(spec, result)

    rows = [[name, str(n_train), str(n_eval)] for name, (n_train, n_eval) in result.per_dataset.items()]
    rows.append(["total", str(result.train_count), str(result.eval_count)])
    TablePrinter().print(["dataset", "train", "eval"], rows)
    print(f"epochs: {manifest.epochs}  fraction: {spec.fraction}  -> {out}")
    return EXIT_OK


def _default_export_dir(cfg: ExperimentConfig, fraction: float) -> Path:
    return cfg.output_dir / "finetune" / f"{cfg.name}-f{fraction:g}"


def _handle_stats(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    splits = load_splits(cfg)
    summaries = summarize(cfg, splits)

    if args.out:
        for name, split in splits.items():
            write_split_manifest(split, Path(args.out) / f"{name}.splits.jsonl")

    if args.format == "json":
        JsonPrinter().print(
            [
                {
                    "dataset": s.dataset,
                    "task": s.task,
                    "train": vars(s.train) if s.train else None,
                    "test": vars(s.test),
                    "majority_bacc": s.baseline.mean if s.baseline else None,
                }
                for s in summaries
            ]
        )
        return EXIT_OK

    headers = ["dataset", "task", "split", "n", "classes", "tokens", "majority"]
    rows = []
    for s in summaries:
        majority = f"{s.baseline.mean:.3f}" if s.baseline else "-"
        for side, st in (("train", s.train), ("test", s.test)):
            if st is None:
                continue
            classes = " ".join(f"{k}:{v:.1f}%" for k, v in st.class_percentages.items())
            tokens = f"{st.token_mean:.1f}±{st.token_std:.1f}"
            rows.append([s.dataset, f"#{s.task}", side, str(st.count), classes, tokens, majority if side == "test" else ""])
    TablePrinter().print(headers, rows)
    return EXIT_OK
