"""Command-line interface: gen-world, train-teacher, distill, eval, gradcheck."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .toyworld import InjectivityError


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="key=value config file")
    sub.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="override the global seed")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpdlab",
                                     description="masked-diffusion distillation laboratory")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (
        ("gen-world", "construct and freeze the codebook/decoder/backbone/dataset"),
        ("train-teacher", "pretrain the multi-step denoiser"),
        ("distill", "distill the one-step student from a trained teacher"),
        ("eval", "TV oracle / Fréchet proxy / fixed-point residual report"),
        ("gradcheck", "finite-difference suite over every autodiff primitive"),
    ):
        sub = subs.add_parser(name, help=helptext)
        _add_common(sub)
        if name in ("train-teacher", "distill", "eval"):
            sub.add_argument("--world", type=Path, default=None, help="world checkpoint path")
        if name in ("distill", "eval"):
            sub.add_argument("--teacher", type=Path, default=None, help="teacher checkpoint path")
        if name == "distill":
            sub.add_argument("--resume", type=Path, default=None,
                             help="student checkpoint to continue from")
            sub.add_argument("--stop-after", type=int, default=None,
                             help="save and exit after this many total steps")
        if name == "eval":
            sub.add_argument("--student", type=Path, default=None, help="student checkpoint path")
        if name == "gradcheck":
            sub.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    return parser


def load_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config is not None:
        return RunConfig.from_file(args.config, overrides)
    cfg = RunConfig()
    for item in overrides:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "gen-world":
            from .pipeline import run_gen_world
            path = run_gen_world(cfg, args.out)
            print(f"wrote {path}")
        elif args.command == "train-teacher":
            from .pipeline import run_train_teacher
            path = run_train_teacher(cfg, args.out, world_path=args.world)
            print(f"wrote {path}")
        elif args.command == "distill":
            from .pipeline import run_distill
            path = run_distill(cfg, args.out, world_path=args.world,
                               teacher_path=args.teacher, resume=args.resume,
                               stop_after=args.stop_after)
            print(f"wrote {path}")
        elif args.command == "eval":
            from .pipeline import run_eval
            path = run_eval(cfg, args.out, world_path=args.world,
                            teacher_path=args.teacher, student_path=args.student)
            print(Path(path).read_text(), end="")
            print(f"wrote {path}")
        elif args.command == "gradcheck":
            from .gradcheck import format_rows, run_suite
            rows = run_suite(corrupt=args.corrupt)
            print(format_rows(rows))
            if not all(r.passed for r in rows):
                return 1
    except (ConfigError, CheckpointError, InjectivityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
