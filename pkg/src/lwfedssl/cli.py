"""Command-line front end: ``lwfs run|partition|eval|report|gradcheck``.

Exit codes:
  0   success
  2   config file missing        3   TOML syntax error
  4   unknown config key         5   invalid or inconsistent config
  6   bad input data, partition or checkpoint file
  7   incomplete run directory (report)
  10  numeric abort during a run (summary.json names the round)
  11  gradient check failure
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import EXIT_INVALID, ConfigFileError, RunConfig, parse_config, validate
from .data import FormatError, PartitionError
from .model import DTYPES, CheckpointError, deserialize_model
from .schedule import ConfigError

EXIT_OK = 0
EXIT_DATA = 6
EXIT_REPORT = 7
EXIT_NUMERIC = 10
EXIT_GRADCHECK = 11

log = logging.getLogger("lwfedssl")


def _workers(flag: int | None) -> int:
    env = os.environ.get("LWFS_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigFileError(f"LWFS_WORKERS must be an integer, got {env!r}") from None
    return max(1, flag or 1)


def _load(args) -> RunConfig:
    cfg = parse_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "precision", None) is not None:
        changes["precision"] = args.precision
    if getattr(args, "out", None):
        changes["out_dir"] = str(args.out)
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
        validate(cfg)
    return cfg


def cmd_run(args) -> int:
    from .experiment import execute_run

    cfg = _load(args)
    workers = _workers(args.workers)
    outcome = execute_run(cfg, cfg.out_dir, workers=workers, dry_run=args.dry_run)
    s = outcome.summary
    if outcome.status == "aborted":
        print(f"aborted in round {s['failed_round']}: {s['error']}", file=sys.stderr)
        return EXIT_NUMERIC
    if outcome.status == "planned":
        print(f"planned {cfg.strategy}: ledger written to {cfg.out_dir}")
    else:
        print(
            f"{cfg.strategy}: probe accuracy {s['probe_accuracy']:.4f} "
            f"(untrained {s['untrained_probe_accuracy']:.4f}); outputs in {cfg.out_dir}"
        )
    return EXIT_OK


def cmd_partition(args) -> int:
    from .experiment import load_run_data, make_partition

    cfg = _load(args)
    part = make_partition(cfg, load_run_data(cfg).pool)
    text = part.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text)
        print(f"partition sizes {part.sizes()} written to {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import fine_tune
    from .experiment import load_run_data, probe_encoder
    from .data import stratified_split

    cfg = _load(args)
    path = Path(args.checkpoint)
    try:
        encoder = deserialize_model(path.read_bytes())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    ev = load_run_data(cfg).eval
    if args.fine_tune:
        split = stratified_split(ev.labels, cfg.probe.test_fraction, cfg.probe.seed)
        report = fine_tune(encoder, ev.features, ev.labels, split=split)
        report.checkpoint = path.name
    else:
        report = probe_encoder(encoder, ev, cfg, path.name)
    text = report.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text)
    print(f"{report.mode} accuracy {report.accuracy:.4f} on {report.n_test} held-out samples")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import comparison_rows, curves_csv, format_table, load_run, rows_csv

    runs = [load_run(p) for p in args.runs]
    rows = comparison_rows(runs)
    print(format_table(rows))
    out = Path(args.output) if args.output else Path(args.runs[0])
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(rows_csv(rows))
    (out / "curves.csv").write_text(curves_csv(runs))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from contextlib import nullcontext

    from . import tensor as T
    from .gradcheck import TOLERANCE, run_suite

    ctx = T.corrupt_gradient(args.corrupt) if args.corrupt else nullcontext()
    with ctx:
        report = run_suite(args.seed)
    for r in report.results:
        mark = "ok  " if r.ok else "FAIL"
        print(f"{mark} {r.name:<18} cases={r.cases:<3} max_rel_err={r.max_rel_error:.3e}")
    worst = report.worst
    print(f"{report.cases} cases; worst {worst.name} {worst.max_rel_error:.3e} (tolerance {TOLERANCE:g})")
    if not report.ok:
        for r in report.failures:
            print(f"gradient check failed: {r.name} max_rel_err={r.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lwfs", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a TOML config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=sorted(DTYPES))
    p.add_argument("--workers", type=int, default=None, help="client worker threads (env LWFS_WORKERS wins)")
    p.add_argument("--dry-run", action="store_true", help="write the analytic ledger only, no training")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition", help="write the client partition as JSON")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("eval", help="linear-probe (or fine-tune) a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--fine-tune", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("-o", "--output", help="directory for comparison.csv and curves.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from .report import ReportError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_REPORT
    except (FormatError, PartitionError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
