"""Command-line entry point: ``mas-faultlab <command>``."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import NoReturn

from .annotator import (
    MODE_JUDGE,
    MODE_RULE,
    AnnotationRecord,
    annotate_traces,
    annotate_traces_llm,
    compare_annotations,
    read_annotations,
    write_annotations,
)
from .campaign import load_campaign
from .const import (
    ANNOTATIONS_FILE,
    BASELINE_DIR,
    BASELINE_SPEC_ID,
    DEFAULT_JUDGE_MODEL,
    DEFAULT_LISTEN,
    DEFAULT_MAX_RETRIES,
    HASH_ALGO,
    MANIFEST_FILE,
    REPORT_JSON_FILE,
    REPORT_TABLE_FILE,
)
from .errors import AnalysisError, ConfigurationError, FaultLabError
from .fixtures import serve_fixtures
from .gateway import serve
from .injector import HttpInjectorEndpoint
from .metrics import (
    ReportFormat,
    UnknownReportFormat,
    build_reports,
    render_report,
)
from .simulator import run_campaign
from .tracelog import (
    ReplayedTrace,
    append_annotations,
    file_digest,
    load_outcomes,
    load_traces,
    read_manifest,
)

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIGURATION = 1
EXIT_EXECUTION = 2
EXIT_ANALYSIS = 3


class UsageError(ConfigurationError):
    """Raised for a malformed command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def exit_code(err: FaultLabError) -> int:
    """Exit code of an error family."""
    if isinstance(err, ConfigurationError):
        return EXIT_CONFIGURATION
    if isinstance(err, AnalysisError):
        return EXIT_ANALYSIS
    return EXIT_EXECUTION


def _existing_dir(path: str, what: str) -> Path:
    directory = Path(path)
    if not directory.is_dir():
        raise ConfigurationError(f"{what} directory {path} does not exist")
    return directory


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    """Run a simulated campaign."""
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    config = load_campaign(args.config)
    result = run_campaign(
        config,
        output_dir=args.out,
        parallel=args.parallel,
        force=args.force,
        verbose=args.payloads,
    )
    print(result.output_dir / MANIFEST_FILE)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    """Run the intercepting gateway until interrupted."""
    config = load_campaign(args.config)
    serve(
        config,
        listen=args.listen,
        upstream=args.upstream,
        output_dir=args.out,
        force=args.force,
        verbose=args.payloads,
    )
    return EXIT_OK


def _offline_flags(traces: Path) -> dict[str, bool]:
    if not (traces / MANIFEST_FILE).exists():
        return {}
    manifest = read_manifest(traces)
    return {
        spec["id"]: bool(spec.get("offline_fallback", False))
        for spec in manifest.specs
        if "id" in spec
    }


def cmd_report(args: argparse.Namespace) -> int:
    """Compute metrics of a campaign and write the report."""
    try:
        fmt = ReportFormat(args.format)
    except ValueError as err:
        raise UnknownReportFormat(f"Unknown report format: {args.format}") from err
    traces = _existing_dir(args.traces, "Traces")
    baseline_dir = _existing_dir(
        args.baseline if args.baseline else str(traces / BASELINE_DIR), "Baseline"
    )
    baseline = load_outcomes(baseline_dir)
    injected = [o for o in load_outcomes(traces) if o.fault_type is not None]
    reports = build_reports(
        baseline,
        injected,
        applicable_only=args.applicable_only,
        offline_fallback=_offline_flags(traces),
    )
    rendered = render_report(reports, fmt)
    name = REPORT_JSON_FILE if fmt is ReportFormat.JSON else REPORT_TABLE_FILE
    target = Path(args.out) if args.out else traces
    target.mkdir(parents=True, exist_ok=True)
    (target / name).write_bytes(rendered)
    sys.stdout.write(rendered.decode("utf-8"))
    _LOGGER.info("Wrote %s", target / name)
    return EXIT_OK


async def _judge(
    args: argparse.Namespace, traces: list[ReplayedTrace]
) -> list[AnnotationRecord]:
    judge = HttpInjectorEndpoint(args.judge)
    try:
        return await annotate_traces_llm(
            traces,
            judge,
            model=args.judge_model,
            max_retries=args.max_retries,
        )
    finally:
        await judge.close()


def cmd_annotate(args: argparse.Namespace) -> int:
    """Annotate traces, or compare two annotation files with --kappa."""
    if args.kappa:
        first, second = args.kappa
        agreement = compare_annotations(
            read_annotations(first), read_annotations(second)
        )
        print(json.dumps(agreement.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.traces:
        raise UsageError("annotate needs --traces (or --kappa A B)")
    if args.mode == MODE_JUDGE and not args.judge:
        raise UsageError("judge mode needs --judge URL")

    directory = _existing_dir(args.traces, "Traces")
    traces = [
        t for t in load_traces(directory) if t.header.spec_id != BASELINE_SPEC_ID
    ]
    if args.mode == MODE_JUDGE:
        records = asyncio.run(_judge(args, traces))
    else:
        records = annotate_traces(traces)
    path = write_annotations(
        Path(args.out) if args.out else directory / ANNOTATIONS_FILE, records
    )
    if (directory / MANIFEST_FILE).exists():
        append_annotations(
            directory,
            {
                "mode": args.mode,
                "path": str(path),
                "records": len(records),
                HASH_ALGO: file_digest(path),
            },
        )
    _LOGGER.info("Annotated %d trace(s) into %s", len(records), path)
    print(path)
    return EXIT_OK


def cmd_mock(args: argparse.Namespace) -> int:
    """Serve a fixture file as a chat-completions endpoint."""
    serve_fixtures(args.fixtures, listen=args.listen)
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of every command."""
    parser = _Parser(
        prog="mas-faultlab",
        description="Fault injection and robustness evaluation for multi-agent systems",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Enable debug logging"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="Run a simulated campaign")
    simulate.add_argument("--config", required=True, help="Campaign file")
    simulate.add_argument("--out", help="Output directory (overrides the config)")
    simulate.add_argument("--parallel", type=int, default=1, help="Concurrent tasks")
    simulate.add_argument("--force", action="store_true", help="Overwrite output")
    simulate.add_argument(
        "--payloads", action="store_true", help="Record payload text in traces"
    )
    simulate.set_defaults(handler=cmd_simulate)

    gateway = commands.add_parser("serve", help="Run the intercepting gateway")
    gateway.add_argument("--config", required=True, help="Campaign file")
    gateway.add_argument("--listen", default=DEFAULT_LISTEN, help="host:port")
    gateway.add_argument("--upstream", help="Upstream URL (overrides the config)")
    gateway.add_argument("--out", help="Output directory (overrides the config)")
    gateway.add_argument("--force", action="store_true", help="Overwrite output")
    gateway.add_argument(
        "--payloads", action="store_true", help="Record payload text in traces"
    )
    gateway.set_defaults(handler=cmd_serve)

    report = commands.add_parser("report", help="Compute robustness metrics")
    report.add_argument("--traces", required=True, help="Campaign output directory")
    report.add_argument("--baseline", help="Baseline traces (default TRACES/baseline)")
    report.add_argument("--format", default=str(ReportFormat.JSON), help="json|table")
    report.add_argument("--out", help="Report directory (default TRACES)")
    report.add_argument(
        "--applicable-only",
        action="store_true",
        help="Exclude fault-inapplicable tasks",
    )
    report.set_defaults(handler=cmd_report)

    annotate = commands.add_parser("annotate", help="Tag fault-tolerance behavior")
    annotate.add_argument("--traces", help="Campaign output directory")
    annotate.add_argument(
        "--mode", choices=(MODE_RULE, MODE_JUDGE), default=MODE_RULE
    )
    annotate.add_argument("--judge", help="Judge chat-completions URL")
    annotate.add_argument("--judge-model", default=DEFAULT_JUDGE_MODEL)
    annotate.add_argument("--max-retries", type=int, default=DEFAULT_MAX_RETRIES)
    annotate.add_argument("--out", help="Annotation file (default TRACES/annotations)")
    annotate.add_argument(
        "--kappa", nargs=2, metavar=("A", "B"), help="Compare two annotation files"
    )
    annotate.set_defaults(handler=cmd_annotate)

    mock = commands.add_parser("mock", help="Serve a fixture file")
    mock.add_argument("--fixtures", required=True, help="Fixture file")
    mock.add_argument("--listen", default=DEFAULT_LISTEN, help="host:port")
    mock.set_defaults(handler=cmd_mock)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIGURATION

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except FaultLabError as err:
        code = exit_code(err)
        _LOGGER.error("%s failed: %s", args.command, err)
        _LOGGER.debug("Traceback", exc_info=err)
        return code
