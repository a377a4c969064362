"""Command-line driver: pretrain, rl, cost, sweep, dump-world.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.  The config
file is JSON (sections: model, sim, train, rl; see README); any field can be
overridden with LAZYREC_SECTION__KEY environment variables, and the common
flags below override both.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .costmodel import ArchSpec, emit_report, reference_specs
from .experiments import (
    NumericalAbort,
    load_config,
    run_dump_world,
    run_pretrain,
    run_rl,
    run_sweep,
)
from .model import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", type=Path, default=None, help="override output directory")
    p.add_argument("--steps", type=int, default=None, help="override step count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lazyrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="minimize the generation loss on a simulated stream")
    _add_common(p)

    p = sub.add_parser("rl", help="feedback-driven policy optimization from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--arm", choices=["traditional_only", "with_onerec"], default=None)
    p.add_argument("--method", choices=["gbpo", "ecpo", "grpo_clip"], default=None)

    p = sub.add_parser("cost", help="architecture FLOPs/activation comparison report")
    p.add_argument("--specs", type=Path, default=None, help="JSON list of architecture specs")
    p.add_argument("--context-lens", default="512,3000", help="comma-separated context lengths")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--out", type=Path, default=None, help="write the report here instead of stdout")

    p = sub.add_parser("sweep", help="one pretrain run per value of one architecture axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=["l_kv", "s_kv", "g_kv", "model_size"])
    p.add_argument("--values", required=True, help="comma-separated integer axis values")

    p = sub.add_parser("dump-world", help="write the world snapshot and an impression log")
    _add_common(p)
    p.add_argument("--impressions", type=int, default=1000)

    return parser


def _load(args) -> "ExperimentConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.sim.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
        cfg.rl.steps = args.steps
    return cfg


def _cmd_cost(args) -> int:
    if args.specs is not None:
        raw = json.loads(args.specs.read_text(encoding="utf-8"))
        specs = [ArchSpec(**item) for item in raw]
    else:
        specs = []
        for n in (float(x) for x in args.context_lens.split(",")):
            specs.extend(reference_specs(context_len=n))
    report = emit_report(specs, fmt=args.format)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report, encoding="utf-8")
    else:
        sys.stdout.write(report)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "cost":
            return _cmd_cost(args)
        cfg = _load(args)
        if args.command == "pretrain":
            out = run_pretrain(cfg)
            print(f"pretrain complete: {out}")
        elif args.command == "rl":
            if args.arm is not None:
                cfg.rl.arm = args.arm
            if args.method is not None:
                cfg.rl.method = args.method
            out = run_rl(cfg, args.checkpoint)
            print(f"rl complete: {out}")
        elif args.command == "sweep":
            values = [int(v) for v in args.values.split(",")]
            out = run_sweep(cfg, args.axis, values)
            print(f"sweep complete: {out}")
        elif args.command == "dump-world":
            out = run_dump_world(cfg, impressions=args.impressions)
            print(f"world dumped: {out}")
        return EXIT_OK
    except (ConfigError, ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
