"""Command-line entry point: ``fedvtc <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, load_config, load_suite
from .errors import FedVTCError
from .report import NoRunsFound, build_report

log = logging.getLogger("fedvtc")


def _common(p: argparse.ArgumentParser, out_default: Optional[str] = None) -> None:
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", type=Path, default=out_default, help="output location")
    p.add_argument("--data-root", help="dataset root (FEDVTC_DATA_ROOT also works)")
    p.add_argument("--train-cap", type=int, help="keep at most this many training samples")
    p.add_argument("--test-cap", type=int, help="keep at most this many test samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedvtc", description="Desk-scale FedVTC simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="build a Dirichlet partition and print per-client class counts")
    _common(p)

    p = sub.add_parser("run", help="run one configuration")
    _common(p, "runs/run")

    p = sub.add_parser("suite", help="run every variant of a suite over several seeds")
    _common(p, "runs/suite")
    p.add_argument("--repeats", type=int, help="number of seeds per variant")
    p.add_argument("--workers", type=int, default=1, help="parallel runs")

    p = sub.add_parser("report", help="summaries and plots from stored runs")
    p.add_argument("root", type=Path)
    p.add_argument("--out", type=Path, help="report directory (default ROOT/report)")

    p = sub.add_parser("dump-synthetic", help="decode synthetic samples from a finished run")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="directory for the PNGs (default RUN_DIR/synthetic-<seed>)")

    p = sub.add_parser("prepare-mnist-subset", help="write the 5000-image MNIST subset as IDX files")
    p.add_argument("dest", type=Path)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data_root:
        overrides["data_root"] = args.data_root
    if args.train_cap is not None:
        overrides["train_cap"] = args.train_cap
    if args.test_cap is not None:
        overrides["test_cap"] = args.test_cap
    return cfg.with_overrides(**overrides)


def cmd_partition(args) -> int:
    from .runner import load_bundle, make_partition

    cfg = _resolve_config(args)
    bundle = load_bundle(cfg)
    spec = make_partition(cfg, bundle)
    labels = bundle.train_y.numpy()
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(spec.to_manifest())
    for k, shard in enumerate(spec.shards):
        counts = Counter(labels[shard].tolist())
        hist = " ".join(f"{y}:{counts[y]}" for y in sorted(counts))
        print(f"client {k}\tn={len(shard)}\t{hist}")
    return 0


def cmd_run(args) -> int:
    from .runner import run_to_dir

    cfg = _resolve_config(args)
    result = run_to_dir(cfg, args.out)
    print(f"{cfg.name} seed={cfg.seed}: accuracy {result.pre_finetune_accuracy:.2f}% before fine-tuning, "
          f"{result.final_accuracy:.2f}% after; output in {args.out}")
    return 0


def cmd_suite(args) -> int:
    from .suite import run_suite

    if args.config is None:
        raise FedVTCError("suite needs --config")
    suite = load_suite(args.config, repeats=args.repeats)
    overrides = {k: v for k, v in (("data_root", args.data_root), ("train_cap", args.train_cap),
                                   ("test_cap", args.test_cap)) if v is not None}
    if overrides:
        suite = type(suite)(suite.name, suite.base.with_overrides(**overrides),
                            {n: c.with_overrides(**overrides) for n, c in suite.variants.items()}, suite.seeds)
    if args.seed is not None:
        suite = type(suite)(suite.name, suite.base, suite.variants, [args.seed + i for i in range(len(suite.seeds))])
    result = run_suite(suite, args.out, workers=args.workers)
    print((args.out / "report" / "summary.md").read_text() if result.rows else "no successful runs", end="")
    return 1 if result.failures else 0


def cmd_report(args) -> int:
    build_report(args.root, args.out)
    out = args.out or args.root / "report"
    print((out / "summary.md").read_text(), end="")
    comparison = out / "comparison.md"
    if comparison.exists():
        print(comparison.read_text(), end="")
    return 0


def cmd_dump_synthetic(args) -> int:
    from .checkpoint import load_module
    from .models import build_vtc_decoder, get_profile
    from .runner import dump_synthetic, load_stats

    cfg = load_config(args.run_dir / "config.ini")
    profile = get_profile(cfg.profile)
    decoder = build_vtc_decoder(profile, profile.p, seed=0)
    load_module(args.run_dir / "checkpoints" / "decoder.ckpt", decoder)
    prototypes, sigma, _ = load_stats(args.run_dir / "checkpoints" / "stats.ckpt")
    out = args.out or args.run_dir / f"synthetic-{args.seed}"
    grid = dump_synthetic(decoder, prototypes, sigma, out, count=args.count, seed=args.seed,
                          num_classes=profile.num_classes)
    print(grid)
    return 0


def cmd_prepare(args) -> int:
    from .data import prepare_mnist_subset

    print(prepare_mnist_subset(args.dest))
    return 0


COMMANDS = {
    "partition": cmd_partition,
    "run": cmd_run,
    "suite": cmd_suite,
    "report": cmd_report,
    "dump-synthetic": cmd_dump_synthetic,
    "prepare-mnist-subset": cmd_prepare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NoRunsFound, FedVTCError, OSError, ValueError, KeyError) as exc:
        print(f"fedvtc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
