#!/usr/bin/env python3
"""CLI entry point for fpi-locate."""

import argparse
import logging
import os
import sys
from pathlib import Path

from .checkpoint import check_compatible, load_checkpoint, restore_model
from .common import THREADS_ENV
from .config import PRESETS, RunConfig, load_config
from .evaluation import (
    benchmark_input_scales,
    compare_retrieval,
    evaluate,
    locate,
    parse_sweep_values,
    run_sweep,
    write_bench,
    write_comparison,
)
from .fusion import FPIModel, save_heatmap_png, save_overlay_png
from .geodata import SPLITS, load_manifest, load_png
from .metrics import write_report
from .synth import synth_generate
from .trainer import train
from .validation import FPIError

logger = logging.getLogger("fpi_locate.cli")

_LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
_LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_FILE = "fpi-locate.log"


def setup_logging(verbose: bool = False, log_dir: str | Path | None = None) -> str | None:
    """Configure the root logger: console on stderr, plus a DEBUG file in *log_dir*.

    Returns the log file path, if any.
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()

    ch = logging.StreamHandler(sys.stderr)
    ch.setLevel(logging.DEBUG if verbose else logging.INFO)
    ch.setFormatter(logging.Formatter(_LOG_FORMAT, datefmt=_LOG_DATE_FORMAT))
    root.addHandler(ch)

    if log_dir is None:
        return None
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, LOG_FILE)
    fh = logging.FileHandler(log_file, encoding="utf-8")
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(logging.Formatter(_LOG_FORMAT, datefmt=_LOG_DATE_FORMAT))
    root.addHandler(fh)
    return log_file


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _config(args) -> RunConfig:
    return load_config(args.config, args.overrides, args.preset)


def _overridden(args) -> bool:
    return bool(args.config or args.overrides or args.preset)


def _model_from_checkpoint(args) -> tuple[FPIModel, RunConfig]:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    if _overridden(args):
        config = _config(args)
        check_compatible(ckpt, config)
    return restore_model(ckpt), config


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    config = _config(args)
    seed = config.seed if args.seed is None else args.seed
    split_dir = synth_generate(
        args.out, args.pairs, seed, config.synth,
        split=args.split,
        query_side=config.model.query_side,
        search_side=config.model.search_side,
        test_scales=config.test_scales,
    )
    print(split_dir)
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    out = Path(args.out)
    setup_logging(args.verbose, out.parent)
    dataset = load_manifest(args.data, "train")
    result = train(config, dataset, out)
    print(result.summary(), file=sys.stderr)
    print(out)
    return 0


def cmd_eval(args) -> int:
    model, config = _model_from_checkpoint(args)
    dataset = load_manifest(args.data, "test")
    records, result = evaluate(model, dataset, config.report)
    write_report(records, result, args.report)
    print(result.summary(), file=sys.stderr)
    print(Path(args.report) / "summary.json")
    return 0


def cmd_infer(args) -> int:
    model, _ = _model_from_checkpoint(args)
    query = load_png(args.query)
    search = load_png(args.search)
    heat, pred = locate(model, query, search)
    print(f"{pred.pixel_xy[0]:.2f} {pred.pixel_xy[1]:.2f} {pred.score:.6f}")
    size = (search.shape[2], search.shape[1])
    if args.heatmap:
        save_heatmap_png(heat, args.heatmap, size)
    if args.overlay:
        save_overlay_png(search, pred.pixel_xy, args.overlay)
    return 0


def cmd_compare_retrieval(args) -> int:
    model, config = _model_from_checkpoint(args)
    dataset = load_manifest(args.data, "test")
    result = compare_retrieval(model, dataset, config.report.k)
    write_comparison(result, args.out)
    print(result.summary(), file=sys.stderr)
    print(args.out)
    return 0


def cmd_sweep(args) -> int:
    config = _config(args)
    setup_logging(args.verbose, args.out)
    values = parse_sweep_values(args.values)
    train_set = load_manifest(args.data, "train")
    test_set = load_manifest(args.data, "test")
    rows = run_sweep(config, args.param, values, train_set, test_set, args.out)
    for r in rows:
        print(f"{r.param}={r.value!r}: RDS {r.report.rds_mean * 100:.2f}", file=sys.stderr)
    print(Path(args.out) / "sweep.csv")
    return 0


def cmd_bench(args) -> int:
    config = _config(args)
    rows = benchmark_input_scales(config, repeats=args.repeats)
    write_bench(rows, args.out)
    print(args.out)
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "compare-retrieval": cmd_compare_retrieval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", "-c", metavar="FILE", help="JSON run configuration")
    common.add_argument(
        "--preset", choices=sorted(PRESETS),
        help="Base preset (default: the file's, else desk)",
    )
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
        help="Override one configuration value (repeatable; value parsed as JSON)",
    )
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging on stderr")

    parser = _Parser(
        prog="fpi-locate",
        description="Locate a UAV image inside a satellite map by direct point prediction.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""\
environment:
  {THREADS_ENV}   cap on worker threads (default: min(4, CPU count))

exit codes:
  0 success, 1 usage or configuration error, 2 data error, 3 numeric failure

examples:
  %(prog)s gen-synth --out data --pairs 32 --seed 7
  %(prog)s gen-synth --out data --pairs 8 --seed 7 --split test
  %(prog)s train --data data --out runs/desk.fpi
  %(prog)s eval --ckpt runs/desk.fpi --data data --report runs/report
  %(prog)s infer --ckpt runs/desk.fpi --query q.png --search s.png --heatmap h.png
  %(prog)s compare-retrieval --ckpt runs/desk.fpi --data data --out runs/compare.csv
  %(prog)s sweep --data data --param loss.w_neg --values 1,5,15,30 --out runs/wneg
  %(prog)s bench --preset paper --out runs/bench.csv
""",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="Generate a synthetic dataset split")
    p.add_argument("--out", required=True, metavar="DIR", help="Dataset root")
    p.add_argument("--pairs", type=int, required=True, metavar="N", help="Number of pairs")
    p.add_argument("--seed", type=int, default=None, metavar="S", help="Generator seed")
    p.add_argument("--split", choices=SPLITS, default="train")

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--data", required=True, metavar="DIR", help="Dataset root")
    p.add_argument("--out", required=True, metavar="CKPT", help="Checkpoint path")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on the test split")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--report", required=True, metavar="OUT", help="Report directory")

    p = sub.add_parser("infer", parents=[common], help="Locate one query in one search map")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--query", required=True, metavar="Q.png")
    p.add_argument("--search", required=True, metavar="S.png")
    p.add_argument("--heatmap", metavar="H.png", help="Write the heatmap at search-image size")
    p.add_argument("--overlay", metavar="O.png", help="Write the search image with the prediction")

    p = sub.add_parser("compare-retrieval", parents=[common],
                       help="Compare FPI with 5x5 tile retrieval")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="CSV")

    p = sub.add_parser("sweep", parents=[common], help="Train and evaluate one run per value")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--param", required=True, metavar="SECTION.FIELD")
    p.add_argument("--values", required=True, metavar="V1,V2,...")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("bench", parents=[common], help="Time inference across input sides")
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--repeats", type=int, default=3, metavar="N")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except FPIError as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
