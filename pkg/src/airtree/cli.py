"""Command-line front end: build, train, eval, mutate, all."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import SCALES, ConfigError, load_config, make_config
from .metrics import format_table
from .pipeline import StageError, cmd_all, cmd_build, cmd_eval, cmd_mutate, cmd_train, echo_config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--out", default="airtree-out", help="artifact directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--scale", choices=sorted(SCALES), help="size preset (default: desk)")
    common.add_argument("--io-ms", type=float, dest="io_ms", help="simulated milliseconds per leaf access")
    common.add_argument("--oracle-predictor", action="store_true", help="also evaluate the exact-truth leaf predictor")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="airtree", description="R-tree with learned leaf prediction: experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build", parents=[common], help="ingest points and build the tree snapshot")
    sub.add_parser("train", parents=[common], help="profile a workload and train router and grid models")
    sub.add_parser("eval", parents=[common], help="evaluate hybrids against the plain R-tree")
    for name, text in (("mutate", "replay a mutation script"), ("all", "run every stage")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--script", help="mutation script (overrides mutation.script)")
    return parser


def resolve_config(args):
    overrides = {"seed": args.seed, "io_ms": args.io_ms}
    if args.oracle_predictor:
        overrides["oracle_predictor"] = True
    if args.config:
        return load_config(args.config, args.scale, **overrides)
    return make_config({k: v for k, v in overrides.items() if v is not None}, args.scale)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    echo_config(cfg, args.out)
    script = getattr(args, "script", None)
    try:
        if args.command == "build":
            print(json.dumps(cmd_build(cfg, args.out), indent=1, sort_keys=True))
        elif args.command == "train":
            art = cmd_train(cfg, args.out)
            print(f"trained {', '.join(cfg.model_kinds)}; {len(art['files'])} artifacts for tree {art['tree_digest'][:12]}")
        elif args.command == "eval":
            print(format_table(cmd_eval(cfg, args.out)), end="")
        elif args.command == "mutate":
            out = cmd_mutate(cfg, args.out, script)
            for policy, rep in out["policies"].items():
                print(policy, json.dumps({k: rep[k] for k in ("operations", "case_histogram", "splits", "overflow_created")}))
        else:
            cmd_all(cfg, args.out, script)
            print(f"done; reports in {args.out}")
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
