"""Command line entry point: ``selkd run|sweep|verify|cache|eval``.

Run settings come from an optional ``key=value`` file (``--config``); any
flag given on the command line overrides the file. Exit status is 0 on
success, 1 on a configuration or input error, 2 when a verification fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Optional, Sequence

from selkd.cache import STORAGE_METHODS, CacheReader, estimate_storage, storage_table
from selkd.errors import ConfigError, SelkdError
from selkd.evaluation import evaluate, write_report
from selkd.models import load_checkpoint
from selkd.training import (
    DEFAULT_SEEDS,
    DistillRun,
    build_cache,
    build_world,
    run_experiment,
    sweep,
    sweep_table,
    verify_estimators,
)

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2

# field -> flag, where the flag is not just the field name with dashes
_FLAG_NAMES = {"lam": "--lambda", "class_U": "--class-u", "cache_path": "--cache", "corpus_path": "--corpus"}


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, and 2 is reserved for failed checks
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file; flags override it")
    g = p.add_argument_group("run settings")
    for f in dataclasses.fields(DistillRun):
        flag = _FLAG_NAMES.get(f.name, "--" + f.name.replace("_", "-"))
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action="store_true", default=argparse.SUPPRESS)
        else:
            g.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, metavar=f.name.upper())


def _config_from(args: argparse.Namespace) -> DistillRun:
    base = DistillRun.from_file(args.config) if args.config else DistillRun()
    names = {f.name for f in dataclasses.fields(DistillRun)}
    given = {k: v for k, v in vars(args).items() if k in names}
    return DistillRun.from_mapping(given, base).validated()


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}", "grid") from None


def cmd_run(args) -> int:
    cfg = _config_from(args)
    result = run_experiment(cfg, args.out)
    for line in result.report.lines():
        print(line)
    for k, v in result.counters.as_dict().items():
        print(f"{k}={v}")
    if result.run_dir is not None:
        print(f"run_dir={result.run_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _config_from(args)
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else list(DEFAULT_SEEDS)
    rows = sweep(args.axis, _floats(args.grid), base, seeds, args.out)
    print(sweep_table(rows, args.axis))
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify_estimators(args.trials, args.seed)
    print(report.text())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_cache_build(args) -> int:
    cfg = _config_from(args)
    if cfg.class_U is None:
        raise ConfigError("cache build needs --class-u", "class_U")
    teacher, train, _ = build_world(cfg)
    size = build_cache(args.out, teacher, train, cfg.class_U, cfg.sampling_seed, cfg.temperature)
    print(f"wrote {args.out}: {len(train)} samples, {size} bytes")
    return EXIT_OK


def cmd_cache_inspect(args) -> int:
    reader = CacheReader(args.path)
    for k, v in reader.summary().items():
        print(f"{k}={v}")
    if args.sample is not None:
        for t, target in enumerate(reader.read_sample(args.sample)):
            print(f"{t}\t{target!r}")
    return EXIT_OK


def cmd_cache_estimate(args) -> int:
    if args.method is None:
        draws = [args.class_u] if args.class_u is not None else [12, 64]
        print(storage_table(args.tokens, args.vocab, draws, args.l))
        return EXIT_OK
    e = estimate_storage(args.method, args.tokens, args.vocab, args.class_u or 64, args.l)
    print(f"method={e.method}")
    print(f"bytes_per_position={float(e.bytes_per_position):g}")
    print(f"total_terabytes={float(e.total_terabytes):g}")
    if e.note:
        print(f"note={e.note}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    student = load_checkpoint(args.checkpoint)
    if student.vocab_size != cfg.vocab_size:
        raise ConfigError(
            f"checkpoint has V={student.vocab_size}, settings say {cfg.vocab_size}", "vocab_size")
    _, _, heldout = build_world(cfg)
    report = evaluate(student, heldout, cfg.ece_bins)
    if args.out:
        write_report(args.out, report, echo=True)
    else:
        print("\n".join(report.lines()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selkd", description="Selective knowledge distillation experiments on a toy teacher.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train one student and evaluate it")
    _add_run_flags(p)
    p.add_argument("--out", help="run directory for report, counters, losses and checkpoint")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="runs over a k or l grid, averaged over seeds")
    _add_run_flags(p)
    p.add_argument("--axis", choices=("k", "l"), default="k")
    p.add_argument("--grid", required=True, help="comma-separated budgets, e.g. 0.01,0.05,0.2,1")
    p.add_argument("--seeds", help="comma-separated seeds (default: %s)" % ",".join(map(str, DEFAULT_SEEDS)))
    p.add_argument("--out", help="directory for per-run artifacts and sweep.tsv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="Monte Carlo checks of the position and class estimators")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cache", help="offline RS-KD teacher cache")
    cache_sub = p.add_subparsers(dest="cache_command", required=True, parser_class=_Parser)
    b = cache_sub.add_parser("build", help="sample sparse targets for the training corpus")
    _add_run_flags(b)
    b.add_argument("--out", required=True, help="cache file to write")
    b.set_defaults(func=cmd_cache_build)
    i = cache_sub.add_parser("inspect", help="print a cache header summary")
    i.add_argument("path")
    i.add_argument("--sample", type=int, help="also dump this sample's targets")
    i.set_defaults(func=cmd_cache_inspect)
    e = cache_sub.add_parser("estimate", help="storage needed per method")
    e.add_argument("--method", choices=STORAGE_METHODS)
    e.add_argument("--tokens", type=float, default=100e9)
    e.add_argument("--vocab", type=int, default=100_000)
    e.add_argument("--class-u", type=int)
    e.add_argument("--l", type=float, default=0.2)
    e.set_defaults(func=cmd_cache_estimate)

    p = sub.add_parser("eval", help="evaluate a saved student on the held-out split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help, or a usage error already reported
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"selkd: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SelkdError, OSError, ValueError) as e:
        print(f"selkd: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
