"""Command-line entry point: ``fqgan {train,sweep,compare,eval,dump-codebook}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .gan import ConfigError
from .harness import (
    AXES,
    Experiment,
    json_text,
    compare_baseline,
    evaluate,
    latest_checkpoint,
    load_checkpoint,
    load_config,
    run_experiment,
    train,
)
from .quantizer import codebook_to_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file (default: built-in defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")


def _resolve_checkpoint(path: Path) -> Path:
    if path.is_dir():
        found = latest_checkpoint(path)
        if found is None:
            raise OSError(f"no checkpoint found in {path}")
        return found
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fqgan", description="Feature-quantized GAN experiments on 2-D mixtures.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_args(p)
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints in --out")

    p = sub.add_parser("sweep", help="grid sweep over one ablation axis")
    _add_config_args(p)
    p.add_argument("--axis", choices=list(AXES), default="none", help="swept hyper-parameter (default: none)")
    p.add_argument("--values", default="", help="comma-separated axis values")
    p.add_argument("--seeds", type=_ints, default=(0,), help="comma-separated seeds (default: 0)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (default: 1)")

    p = sub.add_parser("compare", help="paired FQ vs. baseline runs")
    _add_config_args(p)
    p.add_argument("--seeds", type=_ints, default=(0, 1, 2, 3, 4), help="comma-separated seeds (default: 0..4)")
    p.add_argument("--P", dest="P_values", type=_ints, default=(),
                   help="dictionary sizes K=2^P, one FQ arm each (default: the config's P)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (default: 1)")

    p = sub.add_parser("eval", help="evaluate a checkpoint and print its metrics as JSON")
    p.add_argument("checkpoint", type=Path, help="checkpoint file or run directory")

    p = sub.add_parser("dump-codebook", help="print a checkpoint's codebook in text form")
    p.add_argument("checkpoint", type=Path, help="checkpoint file or run directory")
    p.add_argument("--layer", type=int, help="hidden layer (default: first FQ layer)")
    return parser


def _parse_values(axis: str, text: str) -> tuple:
    if axis == "none":
        return ()
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad sweep values {text!r}") from None
    if not vals:
        raise ConfigError(f"axis {axis} needs --values")
    return tuple(int(v) if axis in ("P", "fq_position") and v.is_integer() else v for v in vals)


def run(args: argparse.Namespace) -> int:
    if args.command == "train":
        cfg = load_config(args.config, args.overrides)
        res = train(cfg, args.out, resume=not args.no_resume)
        print(json_text(res.summary), end="")
        return EXIT_DIVERGENCE if res.diverged else EXIT_OK
    if args.command == "sweep":
        cfg = load_config(args.config, args.overrides)
        exp = Experiment(cfg, args.axis, _parse_values(args.axis, args.values), args.seeds, args.out)
        out = run_experiment(exp, args.workers)
        print(json_text(out), end="")
        failed = any(p["diverged_runs"] for p in out["points"].values())
        return EXIT_DIVERGENCE if failed else EXIT_OK
    if args.command == "compare":
        cfg = load_config(args.config, args.overrides)
        out = compare_baseline(cfg, args.seeds, args.out, args.workers, args.P_values)
        print(json_text({"median": out["median"], "sign_test": out["sign_test"]}), end="")
        diverged = any(arm["diverged"] for r in out["per_seed"].values() for arm in r.values())
        return EXIT_DIVERGENCE if diverged else EXIT_OK
    if args.command == "eval":
        state, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
        record, _ = evaluate(state)
        print(json_text(record.to_json()), end="")
        return EXIT_OK
    if args.command == "dump-codebook":
        state, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
        books = state.disc.codebooks
        if not books:
            raise ConfigError("checkpoint has no codebooks")
        layer = args.layer if args.layer is not None else next(iter(books))
        if layer not in books:
            raise ConfigError(f"no codebook at layer {layer}; available: {sorted(books)}")
        sys.stdout.write(codebook_to_text(books[layer]))
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
