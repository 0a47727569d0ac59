"""Command-line entry point: ``surgnarr <command> [options]``.

Exit codes: 0 success, 1 usage or fatal error, 2 partial failure (some
videos failed; see ``reports/<command>.json``).
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .errors import EmptyInputError, SurgNarrError
from .interleave import MODES
from .pipeline import (
    MODELS,
    VARIANTS,
    PipelineConfig,
    StageResult,
    cmd_build,
    cmd_curate,
    cmd_evaluate,
    cmd_simulate,
    cmd_split,
    cmd_validate,
)
from .synth import write_fixture_set

logger = logging.getLogger("surgnarr")

# CLI flag -> config field
_OVERRIDES = {
    "asr_dir": "asr_dir",
    "meta_dir": "meta_dir",
    "out": "output_dir",
    "fps": "fps",
    "stride": "stride_k",
    "threshold": "threshold",
    "mode": "conditioning_mode",
    "variant": "variant",
    "ratio": "split_ratio",
    "seed": "seed",
    "client": "client",
    "judge": "judge",
    "workers": "workers",
    "cache_dir": "cache_dir",
    "clock": "clock_mode",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML pipeline config (see README)")
    p.add_argument("--asr-dir", type=Path, help="directory of ASR JSON documents")
    p.add_argument("--meta-dir", type=Path, help="directory of per-video metadata JSON")
    p.add_argument("--out", type=Path, help="output directory (artifacts + manifest)")
    p.add_argument("--fps", type=float)
    p.add_argument("--stride", type=int, help="frames per chunk (k)")
    p.add_argument("--threshold", type=float, help="avg log-prob flag threshold")
    p.add_argument("--mode", choices=MODES, help="conditioning mode")
    p.add_argument("--variant", choices=VARIANTS, help="v1 also emits per-chunk state sequences")
    p.add_argument("--ratio", type=float, help="train fraction per meta_type")
    p.add_argument("--seed", type=int)
    p.add_argument("--client", choices=("mock", "external"), help="language-model client")
    p.add_argument("--workers", type=int, help="per-video worker pool size")
    p.add_argument("--cache-dir", type=Path, help="client response cache")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgnarr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("curate", "parse, flag, correct, classify and filter ASR transcripts"),
        ("build", "propose steps, assemble records, build sequences and the split"),
        ("split", "recompute the stratified train/test split from built records"),
    ]:
        _common(sub.add_parser(name, help=help_text))

    p = sub.add_parser("validate", help="check record documents against hierarchy constraints")
    _common(p)
    p.add_argument("records", nargs="*", type=Path, help="record files (default: all built records)")

    p = sub.add_parser("simulate", help="stream test-set sequences through a narration model")
    _common(p)
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--external-cmd", help="command line of an external model process")
    p.add_argument("--name", help="model name for artifacts (default: --model)")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    p.add_argument("--clock", choices=("as_fast_as_possible", "paced"))

    p = sub.add_parser("evaluate", help="pairwise judging and phase-correctness tables")
    _common(p)
    p.add_argument("--judge", choices=("mock", "external"))
    p.add_argument("--fixed-baseline", metavar="NAME", help="judge every model against NAME only")
    p.add_argument("--models", nargs="+", help="restrict to these model names")
    p.add_argument("--narrations", type=Path, help="narrations directory (default: <out>/narrations)")

    p = sub.add_parser("fixtures", help="write the bundled synthetic fixture corpus")
    p.add_argument("root", type=Path)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {
        field: getattr(args, flag)
        for flag, field in _OVERRIDES.items()
        if getattr(args, flag, None) is not None
    }
    return replace(config, **overrides) if overrides else config


def _finish(result: StageResult) -> int:
    print(result.summary())
    return result.exit_code


def run(args: argparse.Namespace) -> int:
    if args.command == "fixtures":
        vids = write_fixture_set(args.root, seed=args.seed)
        print(f"wrote {len(vids)} fixture videos under {args.root}")
        return 0
    config = resolve_config(args)
    if args.command == "curate":
        return _finish(cmd_curate(config))
    if args.command == "build":
        return _finish(cmd_build(config))
    if args.command == "split":
        return _finish(cmd_split(config))
    if args.command == "validate":
        return _finish(cmd_validate(config, args.records))
    if args.command == "simulate":
        command = shlex.split(args.external_cmd) if args.external_cmd else None
        return _finish(
            cmd_simulate(config, args.model, subset=args.subset, external_cmd=command, model_name=args.name)
        )
    if args.command == "evaluate":
        result = cmd_evaluate(
            config, fixed_baseline=args.fixed_baseline, models=args.models, narrations_dir=args.narrations
        )
        print(result.details.pop("text"))
        return _finish(result)
    raise AssertionError(args.command)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except EmptyInputError as exc:
        print(f"error: empty input: {exc}", file=sys.stderr)
        return 1
    except (SurgNarrError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
