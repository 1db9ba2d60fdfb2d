"""Command-line driver: generate feeds, run the pipeline, print report tables.

Subcommands
-----------
generate         write a synthetic feed CSV plus its ground-truth sidecar
replay           run the three-layer pipeline over a recorded feed CSV
run              synthesize a feed and run the pipeline in one step
report           print a plot-ready CSV view of a finished run to stdout
validate-config  check a TOML config file against the schema and exit

Every subcommand writes only inside its ``--out`` directory.  Exit codes:
0 success, 1 usage error (bad flags), 2 data error (unreadable or invalid
input).  Set ``TRITIDE_LOG`` to a level name (e.g. ``INFO``) for progress
logging on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import IO, NoReturn, Optional

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib  # type: ignore[no-redef]

from .ingest import generate_feed, replay_csv, write_feed_csv
from .pipeline import (
    ConfigError,
    RunReport,
    Topology,
    build_topology,
    layer_metrics,
    load_config,
    run,
    synth_config_from,
    validate_config,
)

log = logging.getLogger("tritide.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

#: Column order for each report view; also the layers.csv header.
REPORT_COLUMNS: dict[str, tuple[str, ...]] = {
    "trips": (
        "vehicle",
        "trip_id",
        "service_date",
        "start_time_s",
        "total_move",
        "total_stop",
        "total_time_length",
    ),
    "clusters": (
        "epoch",
        "cluster_id",
        "centroid_lat",
        "centroid_lng",
        "size",
        "nearest_station",
    ),
    "accuracy": (
        "processed_at",
        "rows_received",
        "examples",
        "tested",
        "accuracy",
        "trained_on",
    ),
    "layers": (
        "layer",
        "tuples_in",
        "tuples_out",
        "bytes_in",
        "bytes_out",
        "feedback_count",
        "feedback_classes",
        "min_delay_s",
        "max_delay_s",
    ),
}


class _UsageError(Exception):
    """Flag-level mistake; carries the failing parser's usage text."""

    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.usage = parser.format_usage()


class _DataError(Exception):
    """Unreadable or schema-invalid input; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main owns the codes."""

    def error(self, message: str) -> NoReturn:
        raise _UsageError(self, message)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _configure_logging(level_name: Optional[str]) -> None:
    level = logging.WARNING
    if level_name:
        candidate = getattr(logging, level_name.upper(), None)
        if isinstance(candidate, int):
            level = candidate
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _load_validated(path: str) -> dict:
    try:
        cfg = load_config(path)
    except OSError as exc:
        raise _DataError(f"{path}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise _DataError(f"{path}: invalid TOML: {exc}") from exc
    errors = validate_config(cfg)
    if errors:
        raise _DataError("; ".join(errors))
    return cfg


def _topology(config_path: str, out_dir: Path) -> Topology:
    cfg = _load_validated(config_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return build_topology(cfg, persist_dir=out_dir / "fog_store")
    except ConfigError as exc:  # defensive: validation should have caught it
        raise _DataError(str(exc)) from exc


def _write_table(stream: IO[str], columns: tuple[str, ...], rows: list[dict]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else row.get(c) for c in columns])


def _write_run_outputs(out_dir: Path, report: RunReport) -> None:
    (out_dir / "run.json").write_text(report.to_json(), encoding="utf-8")
    with (out_dir / "layers.csv").open("w", newline="", encoding="utf-8") as fh:
        _write_table(fh, REPORT_COLUMNS["layers"], layer_metrics(report))
    with (out_dir / "feedback.jsonl").open("w", encoding="utf-8") as fh:
        for entry in report.feedback:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    # Wall clock varies run to run, so it lives outside the canonical report.
    meta = {"wall_clock_s": report.wall_clock_s}
    (out_dir / "run_meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    log.info("wrote run.json, layers.csv, feedback.jsonl under %s", out_dir)


def _read_run_json(run_dir: Path) -> dict:
    path = run_dir / "run.json"
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise _DataError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise _DataError(f"{path}: invalid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _load_validated(args.config)
    synth_cfg = synth_config_from(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    feed, truth = generate_feed(synth_cfg)
    rows = write_feed_csv(out_dir / "feed.csv", feed)
    # The injection counters settle only once the stream is fully consumed,
    # so the ground truth is serialized after the CSV is written.
    (out_dir / "ground_truth.json").write_text(
        json.dumps(truth.to_json_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    log.info("generated %d rows for %d trips", rows, len(truth.trips))
    print(f"wrote {rows} rows to {out_dir / 'feed.csv'}")
    return EXIT_OK


def _execute(topo: Topology, feed, out_dir: Path) -> int:
    report = run(topo, feed)
    _write_run_outputs(out_dir, report)
    edge_in = report.layers["edge"].tuples_in
    print(
        f"run complete: {edge_in} tuples in, {len(report.feedback)} feedback "
        f"entries, report in {out_dir / 'run.json'}"
    )
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    topo = _topology(args.config, out_dir)
    feed, _ = generate_feed(
        topo.synth_cfg, topo.net.sched, topo.net.geo, topo.net.dispatch
    )
    return _execute(topo, feed, out_dir)


def cmd_replay(args: argparse.Namespace) -> int:
    feed_path = Path(args.feed)
    if not feed_path.is_file():
        raise _DataError(f"{feed_path}: no such feed file")
    out_dir = Path(args.out)
    topo = _topology(args.config, out_dir)
    return _execute(topo, replay_csv(feed_path), out_dir)


def cmd_report(args: argparse.Namespace) -> int:
    doc = _read_run_json(Path(args.run_dir))
    try:
        if args.what == "layers":
            rows = layer_metrics(RunReport.from_json_dict(doc))
        else:
            rows = doc[args.what]
    except (KeyError, TypeError) as exc:
        raise _DataError(f"run.json: unexpected shape ({exc})") from exc
    _write_table(sys.stdout, REPORT_COLUMNS[args.what], rows)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    _load_validated(args.config)
    print(f"{args.config}: OK")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="tritide",
        description="Three-layer transit stream pipeline: generate, run, report.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic feed CSV plus ground truth")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("replay", help="run the pipeline over a recorded feed CSV")
    p.add_argument("--feed", required=True, help="feed CSV to replay")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_replay)

    p = sub.add_parser("run", help="synthesize a feed and run the pipeline")
    p.add_argument(
        "--synth",
        action="store_true",
        required=True,
        help="use the synthetic generator as the feed source",
    )
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("report", help="print a CSV view of a finished run")
    p.add_argument("--run", required=True, dest="run_dir", help="directory with run.json")
    p.add_argument(
        "--what",
        required=True,
        choices=("trips", "clusters", "accuracy", "layers"),
        help="which table to print",
    )
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("validate-config", help="check a config file against the schema")
    p.add_argument("--config", required=True, help="TOML config file")
    p.set_defaults(handler=cmd_validate)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    _configure_logging(os.environ.get("TRITIDE_LOG"))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(exc.usage)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help exits the parser directly
        code = exc.code
        return code if isinstance(code, int) else EXIT_OK
    try:
        return args.handler(args)
    except _DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
