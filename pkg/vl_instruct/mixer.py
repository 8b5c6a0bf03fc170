"""
Stage plans and the weighted dataset sampler.

A stage plan names the datasets a training stage draws from and their
sampling weights. ``sample_schedule`` turns a plan into a reproducible
per-step trace; ``compile_stage`` renders the traced records into training
prompts.

Plan file::

    stage: 2
    seed: 7
    steps: 50000
    notes: illustrative weights
    entries:
      - {dataset: RefCOCO, path: shards/refcoco.jsonl, weight: 2.0}
      - {dataset: GQA, path: shards/gqa.jsonl, weight: 1.0}
      - {dataset: LAION, path: shards/laion.jsonl, weight: 0, included: false}

Entry paths are relative to the plan file.
"""

from __future__ import annotations

import math
from contextlib import ExitStack
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from loguru import logger

from vl_instruct.corpus import ConversationRecord, CorpusRecord, record_from_json
from vl_instruct.errors import ConfigError, DataError, PlanError, SchemaError
from vl_instruct.grammar import DEFAULT_TEMPLATE, PromptTemplate, TaskIdentifier, split_identifier
from vl_instruct.jsonl import FAIL, SKIP, JsonlWriter, ShardIndex
from vl_instruct.logger import RunLogger
from vl_instruct.rng import AliasTable, EpochCycler, SplitMix64, Xoshiro256StarStar

STAGES = (1, 2, 3)
_MAX_SEED = (1 << 64) - 1


class DataCategory(str, Enum):
    """Data types of the three-stage training mixture."""

    WEAKLY_LABELED = "weakly-labeled"
    GROUNDED_CAPTION = "grounded-caption"
    CAPTION = "caption"
    REC = "rec"
    REG = "reg"
    VQA = "vqa"
    MULTIMODAL_INSTRUCTION = "multimodal-instruction"
    LANGUAGE = "language"


# Which stages may include each category.
INCLUSION_MATRIX: Dict[DataCategory, Tuple[bool, bool, bool]] = {
    DataCategory.WEAKLY_LABELED: (True, False, False),
    DataCategory.GROUNDED_CAPTION: (True, False, False),
    DataCategory.CAPTION: (True, True, True),
    DataCategory.REC: (True, True, True),
    DataCategory.REG: (True, True, True),
    DataCategory.VQA: (True, True, True),
    DataCategory.MULTIMODAL_INSTRUCTION: (False, False, True),
    DataCategory.LANGUAGE: (False, False, True),
}


def normalize_dataset_name(name: str) -> str:
    """Lowercase, with spaces and underscores folded to ``-``."""
    return "-".join(name.strip().lower().replace("_", " ").split())


_KNOWN: Dict[DataCategory, Sequence[str]] = {
    DataCategory.WEAKLY_LABELED: (
        "grit-20m-rec", "grit-20m-reg", "grit-20m-weak", "laion", "cc3m", "sbu",
    ),
    DataCategory.GROUNDED_CAPTION: ("grit-20m", "grit-20m-grounded-caption"),
    DataCategory.CAPTION: ("coco-caption", "textcaps", "text-captions"),
    DataCategory.REC: ("refcoco", "refcoco+", "refcocog", "visual-genome"),
    DataCategory.REG: ("refcoco-reg", "refcoco+-reg", "refcocog-reg"),
    DataCategory.VQA: ("gqa", "vqav2", "ocr-vqa", "ok-vqa", "aok-vqa"),
    DataCategory.MULTIMODAL_INSTRUCTION: (
        "llava", "llava-detail", "llava-reason", "flickr30k",
        "flickr30k-grounded-caption", "flickr30k-detection",
        "multi-task-conversation", "multitask-conversation",
    ),
    DataCategory.LANGUAGE: ("unnatural-instructions",),
}

KNOWN_DATASETS: Dict[str, DataCategory] = {
    name: category for category, names in _KNOWN.items() for name in names
}


def dataset_category(name: str) -> Optional[DataCategory]:
    return KNOWN_DATASETS.get(normalize_dataset_name(name))


@dataclass(frozen=True)
class PlanEntry:
    dataset: str
    weight: float
    included: bool = True
    path: Optional[str] = None
    category: Optional[DataCategory] = None

    @property
    def key(self) -> str:
        return normalize_dataset_name(self.dataset)

    def resolved_category(self) -> Optional[DataCategory]:
        return self.category or dataset_category(self.dataset)


@dataclass(frozen=True)
class StagePlan:
    """
    One training stage's dataset mixture.

    Weights need not sum to one; they are normalized over included entries.
    """

    stage: int
    entries: Tuple[PlanEntry, ...]
    seed: int = 0
    total_steps: int = 1
    notes: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def included(self) -> List[PlanEntry]:
        return [entry for entry in self.entries if entry.included]

    def with_steps(self, steps: int) -> StagePlan:
        return StagePlan(self.stage, self.entries, self.seed, steps, dict(self.notes))


def _entry_from_yaml(raw: Any, base: Path, index: int) -> PlanEntry:
    if not isinstance(raw, dict) or "dataset" not in raw:
        raise ConfigError(f"plan entry {index} needs a 'dataset' name")
    unknown = sorted(set(raw) - {"dataset", "path", "weight", "included", "category"})
    if unknown:
        raise ConfigError(f"plan entry {index}: unknown key(s) {', '.join(unknown)}")

    weight = raw.get("weight", 1.0)
    if isinstance(weight, bool) or not isinstance(weight, (int, float)):
        raise ConfigError(f"plan entry {raw['dataset']}: weight must be a number")
    included = raw.get("included", True)
    if not isinstance(included, bool):
        raise ConfigError(f"plan entry {raw['dataset']}: included must be true or false")

    category = None
    if raw.get("category") is not None:
        try:
            category = DataCategory(normalize_dataset_name(str(raw["category"])))
        except ValueError:
            known = ", ".join(c.value for c in DataCategory)
            raise ConfigError(
                f"plan entry {raw['dataset']}: unknown category "
                f"'{raw['category']}' (known: {known})"
            ) from None

    path = raw.get("path")
    if path is not None:
        path = str(base / str(path))
    return PlanEntry(str(raw["dataset"]), float(weight), included, path, category)


def load_plan(path: Union[str, Path]) -> StagePlan:
    """
    Read a stage plan from YAML.

    Raises:
        ConfigError: Unreadable file or malformed plan
    """
    plan_path = Path(path)
    try:
        with open(plan_path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read plan {plan_path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{plan_path}: plan must be a mapping")

    for key in ("stage", "entries"):
        if key not in data:
            raise ConfigError(f"{plan_path}: plan needs '{key}'")
    entries = data["entries"]
    if not isinstance(entries, list):
        raise ConfigError(f"{plan_path}: 'entries' must be a list")

    for key in ("stage", "seed", "steps"):
        value = data.get(key, 0)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{plan_path}: '{key}' must be an integer")
    notes = data.get("notes") or {}
    if not isinstance(notes, dict):
        notes = {"text": str(notes)}

    return StagePlan(
        stage=data["stage"],
        entries=tuple(_entry_from_yaml(raw, plan_path.parent, i) for i, raw in enumerate(entries)),
        seed=data.get("seed", 0),
        total_steps=data.get("steps", 1),
        notes=notes,
    )


def validate_plan(plan: StagePlan, strict_paper: bool = False) -> List[str]:
    """
    List every problem with a plan; an empty list means the plan is valid.

    Structural checks always run. With ``strict_paper`` each included entry is
    also checked against the stage inclusion matrix.
    """
    violations: List[str] = []
    if plan.stage not in STAGES:
        violations.append(f"stage must be 1, 2 or 3, got {plan.stage}")
    if plan.total_steps < 1:
        violations.append(f"steps must be positive, got {plan.total_steps}")
    if not 0 <= plan.seed <= _MAX_SEED:
        violations.append(f"seed must be an unsigned 64-bit integer, got {plan.seed}")

    seen: Dict[str, str] = {}
    for entry in plan.entries:
        if entry.key in seen:
            violations.append(f"{entry.dataset}: listed twice (also as {seen[entry.key]})")
        seen[entry.key] = entry.dataset
        if not math.isfinite(entry.weight) or entry.weight < 0:
            violations.append(f"{entry.dataset}: weight must be a non-negative number")

    if not any(e.weight > 0 and math.isfinite(e.weight) for e in plan.included):
        violations.append("plan needs at least one included dataset with positive weight")

    if strict_paper and plan.stage in STAGES:
        for entry in plan.included:
            category = entry.resolved_category()
            if category is None:
                violations.append(
                    f"{entry.dataset}: unknown dataset; set 'category' for stage checks"
                )
            elif not INCLUSION_MATRIX[category][plan.stage - 1]:
                violations.append(
                    f"{entry.dataset} ({category.value}) is not used in stage {plan.stage}"
                )
    return violations


def check_plan(plan: StagePlan, strict_paper: bool = False) -> None:
    """
    Raises:
        PlanError: With every violation found by validate_plan
    """
    violations = validate_plan(plan, strict_paper)
    if violations:
        raise PlanError(violations)


@dataclass
class SampleTrace:
    """Per-step ``(dataset, record index)`` draws of a schedule."""

    names: Tuple[str, ...]
    dataset_index: np.ndarray
    record_index: np.ndarray

    def __len__(self) -> int:
        return int(self.dataset_index.shape[0])

    def __iter__(self) -> Iterator[Tuple[int, str, int]]:
        for step in range(len(self)):
            yield step, self.names[self.dataset_index[step]], int(self.record_index[step])

    def counts(self) -> Dict[str, int]:
        totals = np.bincount(self.dataset_index, minlength=len(self.names))
        return {name: int(total) for name, total in zip(self.names, totals)}

    def frequencies(self) -> np.ndarray:
        totals = np.bincount(self.dataset_index, minlength=len(self.names))
        return totals / max(len(self), 1)


def sample_schedule(plan: StagePlan, catalogs: Mapping[str, int]) -> SampleTrace:
    """
    Draw ``plan.total_steps`` (dataset, record) pairs.

    One splitmix64 seeder expands ``plan.seed``: its first four outputs seed
    the dataset-choice generator, the next four per dataset (in entry order)
    seed that dataset's record cycler. Datasets are drawn with an alias table
    over the normalized weights; records cycle through a permutation that is
    reshuffled every epoch.

    Args:
        plan: A valid stage plan
        catalogs: Dataset name to record count for every included dataset

    Raises:
        PlanError: Structurally invalid plan
        ConfigError: Catalog names unknown to the plan or missing counts
        DataError: An included dataset with no records
    """
    check_plan(plan)
    entries = plan.included
    counts = {normalize_dataset_name(name): count for name, count in catalogs.items()}
    unknown = sorted(set(counts) - {entry.key for entry in entries})
    if unknown:
        raise ConfigError(f"catalog names not included in the plan: {', '.join(unknown)}")

    seeder = SplitMix64(plan.seed)
    rng = Xoshiro256StarStar.from_splitmix(seeder)
    cyclers: List[EpochCycler] = []
    for entry in entries:
        if entry.key not in counts:
            raise ConfigError(f"no record count for dataset {entry.dataset}")
        if counts[entry.key] < 1:
            raise DataError(f"dataset {entry.dataset} has no records")
        cyclers.append(EpochCycler(counts[entry.key], Xoshiro256StarStar.from_splitmix(seeder)))

    table = AliasTable([entry.weight for entry in entries])
    dataset_index = np.empty(plan.total_steps, dtype=np.int32)
    record_index = np.empty(plan.total_steps, dtype=np.int64)
    for step in range(plan.total_steps):
        chosen = table.sample(rng)
        dataset_index[step] = chosen
        record_index[step] = cyclers[chosen].next()

    return SampleTrace(tuple(entry.dataset for entry in entries), dataset_index, record_index)


def _turn_instruction(task: TaskIdentifier, instruction: str) -> str:
    identifier, rest = split_identifier(instruction)
    if identifier is not task:
        raise DataError(
            f"instruction starts with {identifier.surface or 'no identifier'} "
            f"but the task is {task.surface or 'none'}"
        )
    return rest


def render_training_pair(
    rec: Union[CorpusRecord, ConversationRecord],
    template: PromptTemplate = DEFAULT_TEMPLATE,
    with_identifiers: bool = True,
) -> Tuple[str, str, str]:
    """
    Full prompt, target and task surface for one record.

    Raises:
        DataError: Identifier/task mismatch or a record with no training target
    """
    if isinstance(rec, ConversationRecord):
        turns = [
            (turn.task, _turn_instruction(turn.task, turn.instruction), turn.target)
            for turn in rec.turns
        ]
        prompt, target = template.render_conversation(turns, with_identifiers)
        return prompt, target, rec.turns[-1].task.surface

    if not rec.target:
        raise DataError(f"record {rec.id} has no training target")
    instruction = _turn_instruction(rec.task, rec.instruction)
    parts = template.parts(instruction, rec.task, has_image=bool(rec.image_ref))
    return template.render(parts, with_identifier=with_identifiers), rec.target, rec.task.surface


@dataclass
class StageResult:
    trace: SampleTrace
    written: int
    skipped: int


def compile_stage(
    plan: StagePlan,
    out_path: Union[str, Path],
    trace_path: Optional[Union[str, Path]] = None,
    on_error: str = FAIL,
    with_identifiers: bool = True,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    run_logger: Optional[RunLogger] = None,
) -> StageResult:
    """
    Sample a stage and write its rendered training pairs in trace order.

    Each output line is ``{"prompt", "target", "task", "source"}``. The
    optional trace file gets one ``{"step", "dataset", "index", "id"}`` line
    per step.

    Raises:
        PlanError, ConfigError: Invalid plan or missing shard paths
        DataError: Empty shard
        SchemaError: Bad record in a shard (fail mode), with path and line
    """
    if on_error not in (FAIL, SKIP):
        raise ConfigError(f"on_error must be '{FAIL}' or '{SKIP}', got '{on_error}'")
    check_plan(plan)
    run_logger = run_logger or RunLogger(f"mix stage {plan.stage}")
    entries = plan.included
    missing = [entry.dataset for entry in entries if not entry.path]
    if missing:
        raise ConfigError(f"plan entries without a shard path: {', '.join(missing)}")

    shards = [ShardIndex(entry.path) for entry in entries]  # type: ignore[arg-type]
    try:
        for entry, shard in zip(entries, shards):
            if len(shard) == 0:
                raise DataError(f"shard for {entry.dataset} is empty: {shard.path}")
            logger.debug("Indexed {} record(s) for {}", len(shard), entry.dataset)

        trace = sample_schedule(plan, {e.dataset: len(s) for e, s in zip(entries, shards)})
        with ExitStack() as stack:
            writer = stack.enter_context(JsonlWriter(out_path))
            trace_writer = (
                stack.enter_context(JsonlWriter(trace_path)) if trace_path is not None else None
            )
            for step, name, index in trace:
                shard = shards[trace.dataset_index[step]]
                line_no = int(shard.line_numbers[index])
                try:
                    _, obj = shard.read(index)
                    if trace_writer is not None:
                        trace_writer.write(
                            {"step": step, "dataset": name, "index": index, "id": obj.get("id", "")}
                        )
                    rec = record_from_json(obj)
                    prompt, target, task = render_training_pair(rec, template, with_identifiers)
                except SchemaError as exc:
                    if on_error == FAIL:
                        raise
                    run_logger.on_record_skipped(exc)
                    continue
                except DataError as exc:
                    error = SchemaError(str(exc), shard.path, line_no)
                    if on_error == FAIL:
                        raise error from exc
                    run_logger.on_record_skipped(error)
                    continue
                writer.write({"prompt": prompt, "target": target, "task": task, "source": name})
                run_logger.on_record_written(rec.id)
    finally:
        for shard in shards:
            shard.close()

    run_logger.on_complete({"stage": plan.stage, "steps": len(trace)})
    return StageResult(trace, writer.count, run_logger.skipped)
