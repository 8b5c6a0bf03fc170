"""
Command-line front end.

    vl-instruct render --task vqa --instruction "What is this?"
    vl-instruct parse "[INST] <Img><ImageHere></Img> [vqa] What is this? [/INST]"
    vl-instruct compile rec --in refcoco.jsonl --out rec.jsonl
    vl-instruct mix --plan configs/plans/stage2.yaml --out stage2.jsonl --strict-paper
    vl-instruct eval --eval refcoco_val.jsonl --predictions preds.jsonl --benchmark RefCOCO
    vl-instruct tensors interp --in pos.bin --out pos64.bin --side 64

Common flags (``--seed``, ``--config``, ``--out``, ``--strict``, ``--jobs``,
``--log-level``) follow the subcommand and default to ``VLI_<FLAG>``
environment variables. Exit codes: 0 success, 1 bad input data, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from loguru import logger

from vl_instruct.config import Settings
from vl_instruct.corpus import DetectionMode, MIN_GROUNDED_PHRASES
from vl_instruct.errors import ConfigError, DataError, ValidationError
from vl_instruct.geometry import RoundingMode
from vl_instruct.grammar import (
    TaskIdentifier,
    benchmark_prompt,
    load_benchmark_prompts,
    parse_prompt,
    split_identifier,
)
from vl_instruct.jsonl import FAIL, SKIP
from vl_instruct.logger import RunLogger, configure_logging
from vl_instruct.manifest import RunManifest
from vl_instruct.markup import GroundedSpan, extract_pairs, parse_grounded
from vl_instruct.metrics import AnswerNormalization, ChairLexicon, run_eval
from vl_instruct.mixer import check_plan, compile_stage, load_plan
from vl_instruct.tensorops import (
    GroupMode,
    PosTable,
    TokenGrid,
    group_tokens,
    interpolate_pos,
    read_tensor,
    write_tensor,
)
from vl_instruct.transforms import TransformRunner, create_transform, list_transforms

ENV_PREFIX = "VLI_"
_TRUE = {"1", "true", "yes", "on"}


def _env(name: str, default: Any = None, cast: Callable[[str], Any] = str) -> Any:
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except (ValueError, argparse.ArgumentTypeError):
        raise ConfigError(f"{ENV_PREFIX}{name}: invalid value {raw!r}") from None


def _env_flag(raw: str) -> bool:
    return raw.strip().lower() in _TRUE


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("common options")
    group.add_argument("--seed", type=_seed, default=_env("SEED", None, _seed),
                       help="random seed for every seeded step (env VLI_SEED)")
    group.add_argument("--config", default=_env("CONFIG"),
                       help="settings YAML file (env VLI_CONFIG)")
    group.add_argument("--out", default=_env("OUT"), help="output path (env VLI_OUT)")
    group.add_argument("--strict", action="store_true", default=_env("STRICT", False, _env_flag),
                       help="stop at the first bad input record instead of skipping it")
    group.add_argument("--jobs", type=_positive_int, default=_env("JOBS", 1, _positive_int),
                       help="worker processes for stateless transforms (env VLI_JOBS)")
    group.add_argument("--log-level", default=_env("LOG_LEVEL"),
                       help="log level name (env VLI_LOG_LEVEL)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="vl-instruct",
        description="Compile and evaluate multi-task vision-language instruction data.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    render = sub.add_parser("render", parents=[common], help="render one prompt")
    render.add_argument("--task", default="none", help="task identifier name, e.g. vqa or refer")
    render.add_argument("--instruction", help="instruction text")
    render.add_argument("--benchmark", help="fill a benchmark template instead of --instruction")
    render.add_argument("--question", help="hole content for --benchmark")
    render.add_argument("--no-image", action="store_true", help="vision-irrelevant instruction")
    render.add_argument("--no-identifier", action="store_true", help="omit the task identifier")
    render.set_defaults(handler=cmd_render)

    parse = sub.add_parser("parse", parents=[common], help="parse a prompt or grounded caption")
    parse.add_argument("text", help="text to parse, or - to read stdin")
    parse.add_argument("--grounded", action="store_true", help="parse grounded-caption markup")
    parse.set_defaults(handler=cmd_parse)

    compile_ = sub.add_parser("compile", parents=[common], help="run a corpus transform")
    compile_.add_argument("transform", choices=list_transforms())
    compile_.add_argument("--in", dest="input", required=True, help="input JSONL")
    compile_.add_argument("--rounding", choices=[m.value for m in RoundingMode],
                          help="rec: pixel-to-grid rounding (default from settings)")
    compile_.add_argument("--min-phrases", type=_positive_int, default=MIN_GROUNDED_PHRASES,
                          help="grounded-select: minimum grounded phrases per caption")
    compile_.add_argument("--mode", choices=[m.value for m in DetectionMode],
                          default=DetectionMode.CAPTION_TO_PHRASES.value,
                          help="detection: record format")
    compile_.add_argument("--turns", type=_positive_int, default=3,
                          help="multiround: maximum turns per conversation")
    compile_.set_defaults(handler=cmd_compile)

    mix = sub.add_parser("mix", parents=[common], help="sample and compile a training stage")
    mix.add_argument("--plan", required=True, help="stage plan YAML")
    mix.add_argument("--steps", type=_positive_int, help="override the plan's step count")
    mix.add_argument("--trace", help="trace JSONL path (default <out>.trace.jsonl)")
    mix.add_argument("--strict-paper", action="store_true",
                     help="enforce the stage inclusion matrix")
    mix.add_argument("--no-identifiers", action="store_true",
                     help="render prompts without task identifiers")
    mix.set_defaults(handler=cmd_mix)

    evaluate = sub.add_parser("eval", parents=[common], help="score predictions")
    evaluate.add_argument("--eval", dest="eval_set", required=True, help="evaluation set JSONL")
    evaluate.add_argument("--predictions", required=True, help="predictions JSONL")
    evaluate.add_argument("--benchmark", required=True, help="e.g. RefCOCO, VQA or CHAIR")
    evaluate.set_defaults(handler=cmd_eval)

    tensors = sub.add_parser("tensors", help="array fixture tooling")
    tensor_sub = tensors.add_subparsers(dest="tensor_command", metavar="OP")
    tensor_sub.required = True
    group = tensor_sub.add_parser("group", parents=[common], help="group visual tokens by four")
    group.add_argument("--in", dest="input", required=True)
    group.add_argument("--mode", choices=[m.value for m in GroupMode],
                       default=GroupMode.ROW_MAJOR_4.value)
    group.set_defaults(handler=cmd_tensors_group)
    interp = tensor_sub.add_parser("interp", parents=[common], help="resize a positional table")
    interp.add_argument("--in", dest="input", required=True)
    interp.add_argument("--side", type=_positive_int, required=True)
    interp.set_defaults(handler=cmd_tensors_interp)
    return parser


def _require_out(args: argparse.Namespace) -> str:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out (or VLI_OUT)")
    return str(args.out)


def _on_error(args: argparse.Namespace) -> str:
    return FAIL if args.strict else SKIP


def _manifest(args: argparse.Namespace, settings: Settings, argv: Sequence[str]) -> RunManifest:
    return RunManifest(
        command=["vl-instruct", *argv], config_hash=settings.digest(), jobs=args.jobs
    )


def cmd_render(args: argparse.Namespace, settings: Settings, argv: Sequence[str] = ()) -> int:
    if args.benchmark:
        if args.question is None:
            raise ConfigError("--benchmark needs --question")
        identifier, instruction = split_identifier(benchmark_prompt(args.benchmark, args.question))
    else:
        if not args.instruction:
            raise ConfigError("render needs --instruction or --benchmark")
        identifier = TaskIdentifier.from_name(args.task)
        instruction = args.instruction
    template = settings.template()
    try:
        parts = template.parts(instruction, identifier, has_image=not args.no_image)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    print(template.render(parts, with_identifier=not args.no_identifier))
    return 0


def _span_json(span: GroundedSpan) -> Dict[str, Any]:
    return {
        "phrase": span.phrase,
        "boxes": [list(box.as_tuple()) for box in span.boxes],
        "range": list(span.char_range),
    }


def cmd_parse(args: argparse.Namespace, settings: Settings, argv: Sequence[str] = ()) -> int:
    text = sys.stdin.read().rstrip("\n") if args.text == "-" else args.text
    if args.grounded:
        g = parse_grounded(text)
        out: Dict[str, Any] = {
            "segments": [
                _span_json(seg) if isinstance(seg, GroundedSpan) else {"text": seg.text}
                for seg in g.segments
            ],
            "pairs": [[phrase, list(box.as_tuple())] for phrase, box in extract_pairs(g)],
        }
    else:
        parts = parse_prompt(text)
        out = {
            "has_image": parts.has_image,
            "image_slot": parts.image_slot if parts.has_image else None,
            "identifier": parts.identifier.surface,
            "instruction": parts.instruction,
        }
    print(json.dumps(out, ensure_ascii=False))
    return 0


def _transform_options(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    if args.transform == "rec":
        return {"rounding": args.rounding or settings.rounding.value}
    if args.transform == "grounded-select":
        return {"min_phrases": args.min_phrases}
    if args.transform == "detection":
        return {"mode": args.mode}
    if args.transform == "multiround":
        return {"turns": args.turns, "seed": args.seed or 0}
    return {}


def cmd_compile(args: argparse.Namespace, settings: Settings, argv: Sequence[str] = ()) -> int:
    out = _require_out(args)
    options = _transform_options(args, settings)
    transform = create_transform(args.transform, **options)
    manifest = _manifest(args, settings, argv)
    manifest.add_input(args.input)
    manifest.options = {"transform": args.transform, **options}
    if args.transform == "multiround":
        manifest.seeds["seed"] = options["seed"]

    run_logger = RunLogger(f"compile {args.transform}")
    runner = TransformRunner(transform, _on_error(args), args.jobs, run_logger)
    written = runner.run(args.input, out)
    manifest.jobs = runner.jobs
    manifest.finish(records=written, skipped=run_logger.skipped)
    manifest.write(out)
    logger.info("Wrote {} record(s) to {}", written, out)
    return 0


def cmd_mix(args: argparse.Namespace, settings: Settings, argv: Sequence[str] = ()) -> int:
    out = _require_out(args)
    plan = load_plan(args.plan)
    if args.steps is not None:
        plan = plan.with_steps(args.steps)
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    check_plan(plan, strict_paper=args.strict_paper)

    trace_path = args.trace or f"{out}.trace.jsonl"
    manifest = _manifest(args, settings, argv)
    manifest.add_input(args.plan)
    for entry in plan.included:
        if entry.path and Path(entry.path).exists():
            manifest.add_input(entry.path)
    manifest.seeds["plan"] = plan.seed
    manifest.jobs = 1
    manifest.options = {
        "stage": plan.stage,
        "strict_paper": args.strict_paper,
        "with_identifiers": not args.no_identifiers,
        "trace": trace_path,
    }

    run_logger = RunLogger(f"mix stage {plan.stage}")
    result = compile_stage(
        plan,
        out,
        trace_path=trace_path,
        on_error=_on_error(args),
        with_identifiers=not args.no_identifiers,
        template=settings.template(),
        run_logger=run_logger,
    )
    manifest.finish(records=result.written, skipped=result.skipped, steps=len(result.trace))
    manifest.write(out)
    for name, count in result.trace.counts().items():
        logger.info("  {}: {} step(s)", name, count)
    return 0


def cmd_eval(args: argparse.Namespace, settings: Settings, argv: Sequence[str] = ()) -> int:
    lexicon = None
    if settings.metrics.lexicon_file:
        lexicon = ChairLexicon.load(settings.metrics.lexicon_file)
    n = settings.metrics.normalize
    report = run_eval(
        args.eval_set,
        args.predictions,
        args.benchmark,
        iou_inclusive=settings.metrics.iou_inclusive,
        normalization=AnswerNormalization(
            n.lowercase, n.strip_punctuation, n.collapse_whitespace, n.drop_articles
        ),
        lexicon=lexicon,
        run_logger=RunLogger(f"eval {args.benchmark}"),
    )

    if args.out:
        manifest = _manifest(args, settings, argv)
        manifest.add_input(args.eval_set)
        manifest.add_input(args.predictions)
        manifest.options = {"benchmark": args.benchmark}
        json_path = Path(f"{args.out}.json")
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(
            json.dumps(report.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
        Path(f"{args.out}.txt").write_text(report.to_table(), encoding="utf-8")
        manifest.finish(records=report.counts.get("total", 0))
        manifest.write(args.out)

    print("  ".join(f"{name}: {value:.4f}" for name, value in report.metrics.items()))
    return 0


def cmd_tensors_group(
    args: argparse.Namespace, settings: Settings, argv: Sequence[str] = ()
) -> int:
    out = _require_out(args)
    grid, _ = read_tensor(args.input)
    grouped = group_tokens(TokenGrid.from_grid(grid), args.mode)
    write_tensor(out, grouped.as_grid())
    logger.info("Grouped {}x{} tokens into {}x{}", *grid.shape[:2], grouped.h, grouped.w)
    return 0


def cmd_tensors_interp(
    args: argparse.Namespace, settings: Settings, argv: Sequence[str] = ()
) -> int:
    out = _require_out(args)
    grid, cls = read_tensor(args.input)
    table = interpolate_pos(PosTable(grid, cls), args.side)
    write_tensor(out, table.grid, table.cls)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        settings = Settings.load(args.config)
        configure_logging(args.log_level or settings.logging.level, settings.logging.json)
        if settings.grammar.benchmarks_file:
            load_benchmark_prompts(settings.grammar.benchmarks_file)
        return int(args.handler(args, settings, argv))
    except ConfigError as exc:
        logger.error("{}", exc)
        return 2
    except DataError as exc:
        logger.error("{}", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
