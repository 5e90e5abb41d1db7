"""Command line entry point.

Commands: gen-data, gen-prompts, train, eval, ablate, report. Every command
takes an optional JSON config plus repeated ``--set section.field=value``
overrides (flags win). Exit codes: 0 success, 2 invalid configuration,
3 numeric failure during training, 4 external generator failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import pipeline
from .config import (
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    validate_config,
)
from .errors import ConfigError, GenerationError, NumericError, ParseError
from .evaluation import EvalReport, format_summary_table, summarize_reports
from .prompts import QuestionBank

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GENERATOR = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="KEY=VALUE", help="override a config field, e.g. steps=100",
    )
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptreid",
        description="Multi-prompt person re-identification experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset directory to create")

    p = sub.add_parser("gen-prompts", help="generate the per-identity prompt file")
    _add_common(p)
    p.add_argument("--out", required=True, help="prompt JSONL path to write")
    p.add_argument("--offline", action="store_true",
                   help="force the deterministic template composer")
    p.add_argument("--question-bank", help="custom question bank JSON")

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--resume-from", help="existing run directory to resume")

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    _add_common(p)
    p.add_argument("--run", required=True, help="run directory with a checkpoint")
    p.add_argument("--out", help="report path (default: <run>/report.json)")

    p = sub.add_parser("ablate", help="train+eval every strategy row")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rows", help="comma-separated strategy rows (default: all six)")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")

    p = sub.add_parser("report", help="aggregate eval report JSON files")
    p.add_argument("reports", nargs="+", help="report.json paths")
    p.add_argument("--csv", help="also write the aggregate as CSV")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides)


def _validated(cfg: RunConfig, require_paths) -> None:
    problems = validate_config(cfg, require_paths)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    _validated(cfg, ())
    dataset = pipeline.generate_data(cfg, args.out)
    print(
        f"wrote {len(dataset.train)} train / {len(dataset.query)} query / "
        f"{len(dataset.gallery)} gallery records to {args.out} "
        f"[config {config_hash(cfg)}]"
    )
    return EXIT_OK


def cmd_gen_prompts(args) -> int:
    cfg = resolve_config(args)
    _validated(cfg, ("dataset_dir",))
    bank = None
    if args.question_bank:
        with open(args.question_bank, encoding="utf-8") as fh:
            bank = QuestionBank.from_json(fh.read())
    prompt_sets = pipeline.generate_prompts(cfg, args.out, offline=args.offline, bank=bank)
    print(f"wrote {len(prompt_sets)} prompt sets to {args.out} [config {config_hash(cfg)}]")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _validated(cfg, ("dataset_dir", "prompts_path"))
    handle = pipeline.train(cfg, args.out, resume_from=args.resume_from)
    print(
        f"trained to step {handle.final_step}; metrics at {handle.metrics_path} "
        f"[config {config_hash(cfg)}]"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    _validated(cfg, ("dataset_dir", "prompts_path"))
    if not os.path.exists(os.path.join(args.run, "checkpoint.ntar")):
        raise ConfigError(f"no checkpoint in run directory {args.run!r}")
    report = pipeline.evaluate(cfg, args.run, report_path=args.out)
    print(
        f"strategy {report.strategy} seed {report.seed}: "
        f"mAP {report.map_score:.4f} R@1 {report.rank1:.4f} "
        f"R@5 {report.rank5:.4f} R@10 {report.rank10:.4f}"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    _validated(cfg, ("dataset_dir", "prompts_path"))
    rows = [r.strip() for r in args.rows.split(",")] if args.rows else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    reports = pipeline.ablate(cfg, args.out, rows=rows, seeds=seeds)
    print(format_summary_table(summarize_reports(reports)))
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as fh:
            reports.append(EvalReport.from_json(fh.read()))
    summary = summarize_reports(reports)
    print(format_summary_table(summary))
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(summary[0].keys()))
            writer.writeheader()
            writer.writerows(summary)
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-prompts": cmd_gen_prompts,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GenerationError as exc:
        print(f"generator failure: {exc}", file=sys.stderr)
        return EXIT_GENERATOR


if __name__ == "__main__":
    sys.exit(main())
