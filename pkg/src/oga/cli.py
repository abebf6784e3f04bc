"""Command-line entry point."""

from __future__ import annotations

import argparse
import sys

from .alt import NumericError
from .bench import MetricError
from .embeddings import EmbeddingFormatError
from .graph import GraphDataError
from .llm import ParseError, TransportError
from .pipeline import (DEFAULT_CONFIG, EXIT_BACKEND, EXIT_CONFIG, EXIT_DATA,
                       EXIT_NUMERIC, STAGES, ConfigError, PipelineConfig,
                       StageFailure, cmd_pipeline, cmd_report, load_config,
                       run_stage)


def _classify_exit(exc: Exception) -> int:
    if isinstance(exc, (ConfigError, ValueError)) and isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (TransportError, ParseError)):
        return EXIT_BACKEND
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (GraphDataError, EmbeddingFormatError, MetricError,
                        FileNotFoundError, ValueError)):
        return EXIT_DATA
    return 1


def _load(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="oga",
        description="Open-world graph pipeline: rejection, annotation, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parsers = {}
    for name in ("pipeline",) + STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline"
                           else "run all stages in order")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        run_parsers[name] = p

    report = sub.add_parser("report", help="summarize a finished run")
    report.add_argument("run_dir")
    report.add_argument("--json", action="store_true", dest="as_json")

    sub.add_parser("default-config", help="print a complete config with default values")

    args = parser.parse_args(argv)

    if args.command == "default-config":
        print(DEFAULT_CONFIG, end="")
        return 0
    if args.command == "report":
        try:
            print(cmd_report(args.run_dir, args.as_json))
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        return 0

    try:
        config = _load(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "pipeline":
            cmd_pipeline(config)
        else:
            config.out_dir.mkdir(parents=True, exist_ok=True)
            run_stage(args.command, config)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _classify_exit(exc.cause)
    except Exception as exc:  # single-stage invocation
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return _classify_exit(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
