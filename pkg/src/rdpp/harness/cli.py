"""``rdpp`` command line.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 when an
experiment fails at run time.  Individual seed failures are logged and
recorded in the manifest; ``run`` fails only when every seed of an agent
fails.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from ..errors import ConfigError, RdppError
from . import commands
from .config import load_config, validate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("rdpp")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdpp", description="Repeated deceptive path planning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", required=True, help="INI experiment file")
        p.add_argument("--out", help="output root (overrides the config and $RDPP_OUT)")
        p.add_argument("--seed", type=int, help="first seed (overrides the config)")
        p.add_argument("--seeds", type=int, help="number of seeds (overrides the config)")
        return p

    with_config(sub.add_parser("pretrain", help="train the learnable observer offline"))
    run = with_config(sub.add_parser("run", help="play K episodes per agent and seed"))
    run.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    run.add_argument("--agent", action="append", help="restrict to this agent (repeatable)")
    run.add_argument("--no-pretrain", action="store_true",
                     help="fail instead of pretraining when the observer checkpoint is missing")
    with_config(sub.add_parser("pirate", help="capture rates of a pursuer at policy snapshots"))
    report = sub.add_parser("report", help="SVG comparison charts over run directories")
    report.add_argument("runs", nargs="+", help="run directories ({out}/{name}-{agent})")
    report.add_argument("--out", required=True, help="directory for the charts")
    report.add_argument("--window", type=int, default=10)
    report.add_argument("--tail", type=int, default=10)
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.seeds is not None:
        cfg.n_seeds = args.seeds
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            if args.window < 1 or args.tail < 1:
                raise ConfigError("--window and --tail must be positive")
            for path in commands.cmd_report(args.runs, args.out, args.window, args.tail):
                print(path)
            return EXIT_OK
        cfg = _config(args)
        if args.command == "pretrain":
            report = commands.cmd_pretrain(cfg)
            print(f"prefix accuracy {report['accuracy']:.3f} -> {report['checkpoint']}")
        elif args.command == "run":
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            manifests = commands.cmd_run(cfg, jobs=args.jobs, agents=args.agent,
                                         pretrain_missing=not args.no_pretrain)
            for agent in manifests:
                print(cfg.run_dir(agent))
            failed = commands.failed_seeds(manifests)
            if failed:
                log.warning("%d seed(s) failed: %s", len(failed), failed)
            if commands.failed_runs(manifests):
                log.error("every seed failed for: %s", ", ".join(commands.failed_runs(manifests)))
                return EXIT_RUNTIME
        else:
            for row in commands.cmd_pirate(cfg):
                print(f"{row['agent']:>7} ep{row['snapshot_episode']:<4} "
                      f"{row['captures']}/{row['trials']} captured ({row['rate']:.3f})")
    except ConfigError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG
    except (RdppError, OSError, ValueError) as err:
        log.error("%s: %s", type(err).__name__, err)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
