"""Command-line entry point: ``cptdst {pretrain,generate-data,run,summarize,export}``.

Environment overrides: ``CPTDST_OUTPUT_DIR`` replaces the configured output
directory, ``CPTDST_WORKERS`` sets how many seeds run concurrently and
``CPTDST_THREADS`` caps the BLAS thread pool of each process.

Exit codes: 0 success, 2 bad configuration or input, 3 a run invariant failed,
4 training diverged.
"""

from __future__ import annotations

import os
import sys

if os.environ.get("CPTDST_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["CPTDST_THREADS"]

import argparse
import json
import logging
from pathlib import Path

from .errors import ContractError, CorpusError, NonFiniteError

log = logging.getLogger("cptdst")

EXIT_CONFIG, EXIT_INVARIANT, EXIT_DIVERGED = 2, 3, 4


def _config(args):
    from .runner import ExperimentConfig, load_config

    record = {}
    if args.config:
        record = load_config(args.config).to_dict()
    if getattr(args, "method", None):
        record["method"] = args.method
    if getattr(args, "seeds", None):
        record["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "backbone", None):
        record.setdefault("backbone", {})["path"] = args.backbone
    if getattr(args, "output_dir", None):
        record["output_dir"] = args.output_dir
    flags = dict(record.get("flags") or {})
    for name in ("msr", "qf", "mr"):
        value = getattr(args, name, None)
        if value is not None:
            flags[name] = value
    if getattr(args, "init", None):
        flags["init"] = args.init
    if flags:
        record["flags"] = flags
    if getattr(args, "workers", None):
        record["workers"] = args.workers
    if os.environ.get("CPTDST_WORKERS"):
        record["workers"] = int(os.environ["CPTDST_WORKERS"])
    env_out = os.environ.get("CPTDST_OUTPUT_DIR")
    if env_out:
        record["output_dir"] = env_out
    return ExperimentConfig.from_dict(record)


def cmd_pretrain(args) -> int:
    from .runner import build_vocab, load_stream, pretrain_from_spec

    config = _config(args)
    extra = load_stream(config.stream) if config.stream.source == "ingest" else None
    model = pretrain_from_spec(config.backbone, build_vocab(extra), extra)
    out = Path(args.out) if args.out else Path(config.output_dir) / "backbone.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    for w in model.warnings:
        log.warning(w)
    print(f"backbone {model.digest()[:12]} ({model.num_params():,} parameters) -> {out}")
    return 0


def cmd_generate_data(args) -> int:
    from .runner import load_stream
    from .stream import validate_stream

    config = _config(args)
    stream = load_stream(config.stream)
    validate_stream(stream)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stream.export(out)
    print(json.dumps(stream.manifest(), indent=1, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    from .runner import bwt_warnings, check_run_invariants, run_experiment, summarize

    config = _config(args)
    run_experiment(config)
    problems = check_run_invariants(config.output_dir)
    text, _, _ = summarize(config.output_dir)
    print(text)
    for p in bwt_warnings(config.output_dir) + problems:
        print(p, file=sys.stderr)
    return EXIT_INVARIANT if problems else 0


def cmd_summarize(args) -> int:
    from .runner import bwt_warnings, check_run_invariants, summarize

    text, csv_text, _ = summarize(args.directory)
    print(text)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    problems = check_run_invariants(args.directory)
    for p in bwt_warnings(args.directory) + problems:
        print(p, file=sys.stderr)
    return EXIT_INVARIANT if problems else 0


def cmd_export(args) -> int:
    from .runner import collect_reports, summarize

    _, _, summary = summarize(args.directory)
    bundle = {"summary": summary, "runs": collect_reports(args.directory)}
    Path(args.out).write_text(json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    print(f"{len(bundle['runs'])} runs -> {args.out}")
    return 0


def _bool_flag(parser, name: str, help_text: str) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=name, action="store_true", default=None, help=help_text)
    group.add_argument(f"--no-{name}", dest=name, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cptdst", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="manufacture the frozen backbone by span-corruption denoising")
    p.add_argument("--config")
    p.add_argument("--output-dir")
    p.add_argument("--out", help="backbone checkpoint path (default <output-dir>/backbone.json)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("generate-data", help="write the configured task stream as a schema corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("run", help="run one method over every configured seed")
    p.add_argument("--config")
    p.add_argument("--method")
    p.add_argument("--seeds", help="comma-separated root seeds")
    p.add_argument("--backbone", help="backbone checkpoint to load instead of pre-training")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int, help="seeds to run concurrently")
    p.add_argument("--init", choices=("random", "cl", "select"))
    _bool_flag(p, "msr", "masked-span formulation (off: service-name format)")
    _bool_flag(p, "qf", "query fusion")
    _bool_flag(p, "mr", "memory replay")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="mean and std table over finished runs")
    p.add_argument("directory")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("export", help="bundle summaries and per-run reports into one JSON file")
    p.add_argument("directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
