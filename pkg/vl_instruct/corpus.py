"""
Record schemas and dataset-construction transforms.

Training records carry their task identifier inside ``instruction`` (for
example ``[refer] give me the location of the red jacket``); the compiler
splits it off again when rendering full prompts.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

from vl_instruct.errors import UnknownEntryError, ValidationError
from vl_instruct.geometry import (
    NormBox,
    PixelBox,
    RoundingMode,
    find_first_box,
    normalize_box,
    parse_box,
    serialize_box,
)
from vl_instruct.grammar import (
    TaskIdentifier,
    benchmark_prompt,
    caption_prompt,
    get_benchmark,
)
from vl_instruct.markup import (
    GroundedText,
    count_spans,
    emit_grounded,
    grounded_from_pairs,
    parse_grounded,
    strip_grounding,
)
from vl_instruct.rng import Xoshiro256StarStar, derive_seed

MIN_GROUNDED_PHRASES = 5
MULTIROUND_SOURCE = "multitask-conversation"


@dataclass(frozen=True)
class ImageMeta:
    image_ref: str
    width: int
    height: int

    def __post_init__(self) -> None:
        _check_size((self.width, self.height))

    @property
    def size(self) -> Tuple[int, int]:
        return (self.width, self.height)


def _check_size(size: Sequence[Any]) -> Tuple[int, int]:
    if len(size) != 2:
        raise ValidationError(f"image_size must be [width, height], got {list(size)}")
    for value in size:
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ValidationError(f"image dimensions must be positive integers, got {list(size)}")
    return (size[0], size[1])


@dataclass(frozen=True)
class AnswerGold:
    answers: Tuple[str, ...]

    def to_json(self) -> Dict[str, Any]:
        return {"answers": list(self.answers)}


@dataclass(frozen=True)
class BoxGold:
    boxes: Tuple[NormBox, ...]

    def to_json(self) -> Dict[str, Any]:
        return {"boxes": [list(box.as_tuple()) for box in self.boxes]}


@dataclass(frozen=True)
class GroundedGold:
    text: GroundedText

    def to_json(self) -> Dict[str, Any]:
        return {"grounded": emit_grounded(self.text)}


@dataclass(frozen=True)
class ObjectsGold:
    """Gold object names for hallucination scoring."""

    objects: Tuple[str, ...]

    def to_json(self) -> Dict[str, Any]:
        return {"objects": list(self.objects)}


Gold = Union[AnswerGold, BoxGold, GroundedGold, ObjectsGold]


def _string_list(value: Any, key: str) -> Tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValidationError(f"gold '{key}' must be a list of strings")
    return tuple(value)


def gold_from_json(obj: Any) -> Gold:
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ValidationError(
            "gold must be an object with exactly one of answers, boxes, grounded, objects"
        )
    (key, value), = obj.items()
    if key == "answers":
        answers = _string_list(value, key)
        if not answers:
            raise ValidationError("gold answers must be non-empty")
        return AnswerGold(answers)
    if key == "boxes":
        if not isinstance(value, list) or not value:
            raise ValidationError("gold boxes must be a non-empty list")
        return BoxGold(tuple(NormBox.from_sequence(b) for b in value))
    if key == "grounded":
        if not isinstance(value, str):
            raise ValidationError("gold grounded must be a markup string")
        return GroundedGold(parse_grounded(value))
    if key == "objects":
        return ObjectsGold(_string_list(value, key))
    raise ValidationError(f"unknown gold kind '{key}'")


def _task_from_json(value: Any) -> TaskIdentifier:
    if not isinstance(value, str):
        raise ValidationError(f"task must be a string, got {value!r}")
    try:
        return TaskIdentifier.from_name(value)
    except UnknownEntryError as exc:
        raise ValidationError(str(exc)) from None


def _require(obj: Dict[str, Any], key: str, kind: type) -> Any:
    if key not in obj:
        raise ValidationError(f"missing key '{key}'")
    value = obj[key]
    if not isinstance(value, kind):
        raise ValidationError(f"'{key}' must be {kind.__name__}, got {type(value).__name__}")
    return value


@dataclass(frozen=True)
class CorpusRecord:
    """
    One training or evaluation example.

    Training records need a target; evaluation records need gold. Records
    without an image (language-only data) use ``image_ref == ""`` and
    ``image_size == (0, 0)``.
    """

    id: str
    task: TaskIdentifier
    image_ref: str
    image_size: Tuple[int, int]
    instruction: str
    target: str = ""
    gold: Optional[Gold] = None
    source_dataset: str = ""
    weak_label: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", TaskIdentifier(self.task))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if not self.id:
            raise ValidationError("record id must be non-empty")
        if not self.instruction.strip():
            raise ValidationError(f"record {self.id}: instruction must be non-empty")
        if self.image_ref:
            _check_size(self.image_size)
        elif self.task is not TaskIdentifier.NONE:
            raise ValidationError(f"record {self.id}: task {self.task.surface} needs an image")
        if not self.target and self.gold is None:
            raise ValidationError(f"record {self.id}: needs a target (training) or gold (eval)")

    @property
    def is_eval(self) -> bool:
        return self.gold is not None

    @property
    def image(self) -> ImageMeta:
        return ImageMeta(self.image_ref, *self.image_size)

    def to_json(self) -> Dict[str, Any]:
        obj: Dict[str, Any] = {
            "id": self.id,
            "task": self.task.surface,
            "image": self.image_ref,
            "image_size": list(self.image_size),
            "instruction": self.instruction,
            "target": self.target,
        }
        if self.gold is not None:
            obj["gold"] = self.gold.to_json()
        obj["source"] = self.source_dataset
        obj["weak"] = self.weak_label
        return obj

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> CorpusRecord:
        """
        Build a record from its JSONL form.

        Raises:
            ValidationError: Missing keys, wrong types or broken invariants
        """
        image_ref = obj.get("image", "")
        if not isinstance(image_ref, str):
            raise ValidationError("'image' must be a string")
        size = obj.get("image_size", [0, 0])
        if not isinstance(size, list):
            raise ValidationError("'image_size' must be [width, height]")
        target = obj.get("target", "")
        if not isinstance(target, str):
            raise ValidationError("'target' must be a string")
        weak = obj.get("weak", False)
        if not isinstance(weak, bool):
            raise ValidationError("'weak' must be a boolean")
        gold = gold_from_json(obj["gold"]) if obj.get("gold") is not None else None
        return cls(
            id=_require(obj, "id", str),
            task=_task_from_json(obj.get("task", "")),
            image_ref=image_ref,
            image_size=tuple(size),  # type: ignore[arg-type]
            instruction=_require(obj, "instruction", str),
            target=target,
            gold=gold,
            source_dataset=str(obj.get("source", "")),
            weak_label=weak,
        )


@dataclass(frozen=True)
class Turn:
    task: TaskIdentifier
    instruction: str
    target: str
    record_id: str = ""

    def to_json(self) -> Dict[str, Any]:
        return {
            "task": self.task.surface,
            "instruction": self.instruction,
            "target": self.target,
            "record": self.record_id,
        }


@dataclass(frozen=True)
class ConversationRecord:
    """A multi-round conversation over one image."""

    id: str
    image_ref: str
    image_size: Tuple[int, int]
    turns: Tuple[Turn, ...]
    source_dataset: str = MULTIROUND_SOURCE

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if not self.id:
            raise ValidationError("conversation id must be non-empty")
        if len(self.turns) < 2:
            raise ValidationError(f"conversation {self.id} needs at least 2 turns")
        _check_size(self.image_size)
        for turn in self.turns:
            if not turn.instruction.strip() or not turn.target:
                raise ValidationError(
                    f"conversation {self.id}: every turn needs an instruction and a target"
                )

    def to_json(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "image": self.image_ref,
            "image_size": list(self.image_size),
            "turns": [turn.to_json() for turn in self.turns],
            "source": self.source_dataset,
        }

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> ConversationRecord:
        turns = _require(obj, "turns", list)
        parsed = []
        for turn in turns:
            if not isinstance(turn, dict):
                raise ValidationError("each turn must be an object")
            parsed.append(
                Turn(
                    task=_task_from_json(turn.get("task", "")),
                    instruction=_require(turn, "instruction", str),
                    target=_require(turn, "target", str),
                    record_id=str(turn.get("record", "")),
                )
            )
        return cls(
            id=_require(obj, "id", str),
            image_ref=_require(obj, "image", str),
            image_size=tuple(_require(obj, "image_size", list)),  # type: ignore[arg-type]
            turns=tuple(parsed),
            source_dataset=str(obj.get("source", MULTIROUND_SOURCE)),
        )


AnyRecord = Union[CorpusRecord, ConversationRecord]


def record_from_json(obj: Dict[str, Any]) -> AnyRecord:
    """Dispatch on the presence of ``turns``."""
    if "turns" in obj:
        return ConversationRecord.from_json(obj)
    return CorpusRecord.from_json(obj)


def image_from_json(obj: Dict[str, Any]) -> ImageMeta:
    size = _check_size(_require(obj, "image_size", list))
    return ImageMeta(_require(obj, "image", str), *size)


# -- REC / REG ---------------------------------------------------------------


def make_rec_record(
    phrase: str,
    box: PixelBox,
    image: ImageMeta,
    record_id: str,
    source: str = "refcoco",
    rounding: Union[RoundingMode, str] = RoundingMode.HALF_UP,
) -> CorpusRecord:
    """
    Build a referring-expression-comprehension record.

    The instruction is the REC benchmark template over the phrase; the target
    is the serialized normalized box.

    Raises:
        OutOfRangeError: If the box does not fit the image
    """
    norm = normalize_box(box, image.width, image.height, rounding)
    return CorpusRecord(
        id=record_id,
        task=TaskIdentifier.REFER,
        image_ref=image.image_ref,
        image_size=image.size,
        instruction=benchmark_prompt("REC", phrase),
        target=serialize_box(norm),
        gold=BoxGold((norm,)),
        source_dataset=source,
    )


def rec_records_from_annotation(
    obj: Dict[str, Any],
    rounding: Union[RoundingMode, str] = RoundingMode.HALF_UP,
) -> List[CorpusRecord]:
    """
    Explode a raw REC annotation into one record per box.

    Annotation form: ``{"id", "image", "image_size", "phrase", "boxes": [[x0, y0,
    x1, y1], ...], "source"}`` in pixels. Multi-box annotations get ids
    suffixed ``-0``, ``-1``, ...
    """
    record_id = _require(obj, "id", str)
    phrase = _require(obj, "phrase", str)
    boxes = _require(obj, "boxes", list)
    if not boxes:
        raise ValidationError(f"annotation {record_id} has no boxes")
    image = image_from_json(obj)
    source = str(obj.get("source", "refcoco"))

    records = []
    for k, coords in enumerate(boxes):
        if not isinstance(coords, list) or len(coords) != 4:
            raise ValidationError(f"annotation {record_id}: box {k} must be [x0, y0, x1, y1]")
        rid = record_id if len(boxes) == 1 else f"{record_id}-{k}"
        records.append(make_rec_record(phrase, PixelBox(*coords), image, rid, source, rounding))
    return records


def _record_boxes(rec: CorpusRecord) -> Tuple[NormBox, ...]:
    if isinstance(rec.gold, BoxGold):
        return rec.gold.boxes
    found = find_first_box(rec.target)
    return (found[0],) if found is not None else ()


def invert_to_reg(rec: CorpusRecord) -> CorpusRecord:
    """
    Swap the direction of a referring-expression record.

    A REC record (phrase → box) becomes a REG record (box → phrase) with id
    suffix ``-reg``. A REG record is inverted back to REC, so applying this
    twice recovers the original phrase/box pair.

    Raises:
        ValidationError: Multi-box REC records, or instructions that do not
            match the registered REC/REG templates
    """
    if rec.task is TaskIdentifier.REFER:
        boxes = _record_boxes(rec)
        if len(boxes) != 1:
            raise ValidationError(
                f"record {rec.id}: REG inversion needs exactly one box, found {len(boxes)}"
            )
        phrase = get_benchmark("REC").extract_question(rec.instruction)
        if phrase is None:
            raise ValidationError(f"record {rec.id}: instruction does not match the REC template")
        return replace(
            rec,
            id=f"{rec.id}-reg",
            task=TaskIdentifier.IDENTIFY,
            instruction=benchmark_prompt("REG", serialize_box(boxes[0])),
            target=phrase,
            gold=AnswerGold((phrase,)),
        )

    if rec.task is TaskIdentifier.IDENTIFY:
        box_text = get_benchmark("REG").extract_question(rec.instruction)
        if box_text is None:
            raise ValidationError(f"record {rec.id}: instruction does not match the REG template")
        box = parse_box(box_text)
        phrase = rec.target
        if not phrase and isinstance(rec.gold, AnswerGold):
            phrase = rec.gold.answers[0]
        record_id = rec.id[: -len("-reg")] if rec.id.endswith("-reg") else f"{rec.id}-rec"
        return replace(
            rec,
            id=record_id,
            task=TaskIdentifier.REFER,
            instruction=benchmark_prompt("REC", phrase),
            target=box_text,
            gold=BoxGold((box,)),
        )

    raise ValidationError(
        f"record {rec.id}: only [refer] and [identify] records can be inverted, "
        f"got {rec.task.surface or 'no identifier'}"
    )


# -- grounded captions -------------------------------------------------------


def select_grounded_captions(
    captions: Iterable[GroundedText], min_phrases: int = MIN_GROUNDED_PHRASES
) -> Iterator[GroundedText]:
    """Keep captions with at least ``min_phrases`` grounded spans, in order."""
    for caption in captions:
        if count_spans(caption) >= min_phrases:
            yield caption


def caption_from_annotation(obj: Dict[str, Any]) -> Tuple[str, ImageMeta, GroundedText, str]:
    """
    Read a grounded caption annotation.

    Form: ``{"id", "image", "image_size", "caption": "<markup>", "source"}``.

    Returns:
        ``(id, image, parsed caption, source)``
    """
    record_id = _require(obj, "id", str)
    caption = parse_grounded(_require(obj, "caption", str))
    return record_id, image_from_json(obj), caption, str(obj.get("source", "flickr30k"))


def make_grounded_caption_record(
    g: GroundedText, image: ImageMeta, record_id: str, source: str = "flickr30k"
) -> CorpusRecord:
    parts = caption_prompt("grounded")
    return CorpusRecord(
        id=record_id,
        task=parts.identifier,
        image_ref=image.image_ref,
        image_size=image.size,
        instruction=f"{parts.identifier.surface} {parts.instruction}",
        target=emit_grounded(g),
        gold=GroundedGold(g),
        source_dataset=source,
    )


class DetectionMode(str, Enum):
    CAPTION_TO_PHRASES = "caption-to-phrases"
    PHRASE_TO_PHRASE = "phrase-to-phrase"


_DETECTION_PREFIX = TaskIdentifier.DETECTION.surface + " "


def make_detection_records(
    g: GroundedText,
    mode: Union[DetectionMode, str],
    image: ImageMeta,
    record_id: str,
    source: str = "flickr30k",
) -> List[CorpusRecord]:
    """
    Build object-parsing-and-grounding records.

    ``caption-to-phrases`` gives one record mapping the plain caption to its
    grounded form; ``phrase-to-phrase`` gives one record per span mapping the
    phrase to ``<p>phrase</p>`` plus its boxes.

    Raises:
        ValidationError: If the caption has no grounded spans
    """
    spans = g.spans
    if not spans:
        raise ValidationError(f"record {record_id}: detection records need a grounded phrase")

    def record(rid: str, instruction: str, target: GroundedText) -> CorpusRecord:
        return CorpusRecord(
            id=rid,
            task=TaskIdentifier.DETECTION,
            image_ref=image.image_ref,
            image_size=image.size,
            instruction=_DETECTION_PREFIX + instruction,
            target=emit_grounded(target),
            gold=GroundedGold(target),
            source_dataset=source,
        )

    if DetectionMode(mode) is DetectionMode.CAPTION_TO_PHRASES:
        return [record(f"{record_id}-det", strip_grounding(g), g)]

    return [
        record(
            f"{record_id}-det{k}",
            span.phrase,
            grounded_from_pairs([(span.phrase, span.boxes)]),
        )
        for k, span in enumerate(spans)
    ]


# -- multi-round mixing ------------------------------------------------------


@dataclass(frozen=True)
class MultiroundResult:
    conversations: List[ConversationRecord]
    passthrough: List[CorpusRecord]


def _conversation_id(seed: int, records: Sequence[CorpusRecord]) -> str:
    return f"mr-{derive_seed(seed, '|'.join(r.id for r in records)):016x}"


def build_multiround(
    records: Sequence[CorpusRecord], turns_per_conv: int, seed: int
) -> MultiroundResult:
    """
    Mix single-round records on the same image into multi-round conversations.

    Records are grouped by ``image_ref``. Each group gets its own generator
    seeded from ``(seed, image_ref)``; its records are shuffled and dealt into
    conversations of up to ``turns_per_conv`` turns with distinct tasks. Every
    record is used at most once; records left over (or in groups with fewer
    than two distinct tasks) are passed through untouched, in input order.

    Raises:
        ValidationError: If turns_per_conv < 2
    """
    if turns_per_conv < 2:
        raise ValidationError(f"turns_per_conv must be at least 2, got {turns_per_conv}")

    groups: Dict[str, List[int]] = OrderedDict()
    for position, rec in enumerate(records):
        if rec.image_ref and rec.task is not TaskIdentifier.NONE and rec.target:
            groups.setdefault(rec.image_ref, []).append(position)

    conversations: List[ConversationRecord] = []
    used: Set[int] = set()
    for image_ref, positions in groups.items():
        rng = Xoshiro256StarStar.from_seed(derive_seed(seed, image_ref))
        order = list(positions)
        rng.shuffle(order)

        buckets: Dict[TaskIdentifier, List[int]] = OrderedDict()
        for position in order:
            buckets.setdefault(records[position].task, []).append(position)

        while True:
            live = [task for task, members in buckets.items() if members]
            if len(live) < 2:
                break
            live.sort(key=lambda task: -len(buckets[task]))
            chosen = [buckets[task].pop(0) for task in live[:turns_per_conv]]
            rng.shuffle(chosen)
            members = [records[p] for p in chosen]
            conversations.append(
                ConversationRecord(
                    id=_conversation_id(seed, members),
                    image_ref=image_ref,
                    image_size=members[0].image_size,
                    turns=tuple(Turn(r.task, r.instruction, r.target, r.id) for r in members),
                )
            )
            used.update(chosen)

    passthrough = [rec for position, rec in enumerate(records) if position not in used]
    return MultiroundResult(conversations, passthrough)

