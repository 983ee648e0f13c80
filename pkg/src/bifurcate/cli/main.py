"""``bifurcate <subcommand> [--config PATH] [--set key=value ...] [--out DIR] [--profile desk|paper] [--seed N]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from ..errors import BifurcateError, ConfigError, DependencyError, IntegrityError
from . import config, runs
from .commands import COMMANDS, RESUMABLE, Run

EXIT_CODES = {ConfigError: 3, DependencyError: 4, IntegrityError: 5}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bifurcate", description="Weight-tied multi-solution experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="<subcommand>")
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run {name}")
        sp.add_argument("--config", help="YAML file overlaying the profile defaults")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, repeatable")
        sp.add_argument("--out", help="run directory (default: $%s/<subcommand>-seed<N>)" % runs.OUT_ENV)
        sp.add_argument("--profile", default="desk", choices=config.PROFILES)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    rp = sub.add_parser("resume", help="continue an interrupted training run")
    rp.add_argument("manifest", help="manifest.yaml or the run directory holding it")
    return p


def _threads() -> None:
    n = os.environ.get(runs.THREADS_ENV)
    if n:
        try:
            torch.set_num_threads(int(n))
        except ValueError:
            raise ConfigError(f"{runs.THREADS_ENV} must be an integer, got {n!r}") from None


def execute(command: str, cfg: dict, run_dir: Path, profile: str = "desk", seed: int = 0) -> int:
    """Run one subcommand into ``run_dir`` with a fresh manifest."""
    run_dir.mkdir(parents=True, exist_ok=True)
    man = runs.new_manifest(command, cfg, profile, seed)
    man.write(run_dir)
    status = COMMANDS[command](cfg, Run(run_dir, man))
    return _finalize(run_dir, man, status)


def _finalize(run_dir: Path, man: runs.RunManifest, status: int) -> int:
    if man.status == "interrupted":
        man.write(run_dir)
    else:
        man.finish(run_dir)
    return status


def resume(manifest_path: str) -> int:
    path = Path(manifest_path)
    run_dir = path if path.is_dir() else path.parent
    man = runs.RunManifest.read(path)
    if man.status == "complete":
        print(f"{run_dir}: already complete, nothing to do")
        return 0
    if man.experiment not in RESUMABLE:
        raise ConfigError(f"{man.experiment} runs cannot be resumed; rerun them instead")
    if man.code_version != runs.code_version():
        logging.getLogger(__name__).warning("code changed since this run started")
    state = runs.load_checkpoint(run_dir, man.outputs.get(runs.CHECKPOINT))
    man.config = {**man.config, "stop_after_epoch": 0}
    man.status = "running"
    man.write(run_dir)
    status = COMMANDS[man.experiment](man.config, Run(run_dir, man, resume=state))
    return _finalize(run_dir, man, status)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _threads()
        if args.command == "resume":
            return resume(args.manifest)
        cfg = config.resolve(args.command, args.profile, args.config, args.overrides)
        if args.print_config:
            print(config.dump(cfg), end="")
            return 0
        run_dir = Path(args.out) if args.out else runs.default_run_dir(args.command, args.seed)
        return execute(args.command, cfg, run_dir, args.profile, args.seed)
    except BifurcateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for cls, code in EXIT_CODES.items():
            if isinstance(exc, cls):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
