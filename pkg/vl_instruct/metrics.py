"""
Evaluation scorers: REC accuracy, VQA top-1 accuracy and CHAIR hallucination.

Scorers never raise on model output; malformed predictions are simply
incorrect. Configuration problems (unknown benchmarks, gold objects outside
the lexicon) raise ConfigError.
"""

from __future__ import annotations

import re
import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import yaml
from loguru import logger

from vl_instruct.corpus import AnswerGold, BoxGold, CorpusRecord, ObjectsGold
from vl_instruct.errors import ConfigError, DataError, LexiconError, SchemaError, ValidationError
from vl_instruct.geometry import NormBox, find_first_box, iou_matrix
from vl_instruct.grammar import (
    BENCHMARKS,
    PromptParts,
    TaskIdentifier,
    caption_prompt,
    split_identifier,
)
from vl_instruct.jsonl import FAIL, iter_records
from vl_instruct.logger import RunLogger
from vl_instruct.markup import parse_grounded_lenient, strip_grounding

DEFAULT_LEXICON = Path(__file__).parent / "data" / "chair_lexicon.yaml"

REC = "rec"
VQA = "vqa"
CHAIR = "chair"

REC_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Prediction:
    id: str
    output: str

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> Prediction:
        record_id = obj.get("id")
        output = obj.get("output")
        if not isinstance(record_id, str) or not record_id:
            raise ValidationError("prediction needs a non-empty string 'id'")
        if not isinstance(output, str):
            raise ValidationError("prediction needs a string 'output'")
        return cls(record_id, output)


# -- REC -----------------------------------------------------------------------


def score_rec(
    pred: Union[Prediction, str],
    gold: Union[NormBox, Sequence[NormBox]],
    inclusive: bool = False,
) -> bool:
    """
    Whether the first box in the prediction overlaps a gold box with IoU > 0.5.

    All gold boxes are compared at once through ``iou_matrix``. Grid areas are
    at most 10^4, so the float IoU compares against 0.5 exactly. ``inclusive``
    accepts IoU == 0.5 as well. A prediction without a well-formed box is
    incorrect.
    """
    text = pred.output if isinstance(pred, Prediction) else pred
    found = find_first_box(text)
    if found is None:
        return False
    golds = (gold,) if isinstance(gold, NormBox) else tuple(gold)
    if not golds:
        return False
    ious = iou_matrix((found[0],), golds)[0]
    if inclusive:
        return bool(np.any(ious >= REC_IOU_THRESHOLD))
    return bool(np.any(ious > REC_IOU_THRESHOLD))


# -- VQA -----------------------------------------------------------------------


@dataclass(frozen=True)
class AnswerNormalization:
    """Switches for each answer normalization step."""

    lowercase: bool = True
    strip_punctuation: bool = True
    collapse_whitespace: bool = True
    drop_articles: bool = True


DEFAULT_NORMALIZATION = AnswerNormalization()

_ASCII_PUNCTUATION = str.maketrans("", "", string.punctuation)
_LEADING_ARTICLE = re.compile(r"(?:a|an|the)\s+(?=\S)", re.IGNORECASE)


def _remove_punctuation(text: str) -> str:
    text = text.translate(_ASCII_PUNCTUATION)
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def normalize_answer(s: str, options: AnswerNormalization = DEFAULT_NORMALIZATION) -> str:
    """
    Canonical form of a short answer.

    Steps, each switchable: lowercase, remove punctuation, collapse
    whitespace, drop leading articles. Leading and trailing whitespace is
    always stripped. ``yes``/``no``/``true``/``false`` are left as they are.
    """
    text = s.strip()
    if options.lowercase:
        text = text.lower()
    if options.strip_punctuation:
        text = _remove_punctuation(text).strip()
    if options.collapse_whitespace:
        text = " ".join(text.split())
    if options.drop_articles:
        while True:
            match = _LEADING_ARTICLE.match(text)
            if match is None:
                break
            text = text[match.end():]
    return text


def score_vqa(
    pred: Union[Prediction, str],
    gold: Iterable[str],
    options: AnswerNormalization = DEFAULT_NORMALIZATION,
) -> bool:
    """Top-1 match of the normalized prediction against any normalized gold answer."""
    text = pred.output if isinstance(pred, Prediction) else pred
    answer = normalize_answer(text, options)
    return any(answer == normalize_answer(g, options) for g in gold)


# -- CHAIR ---------------------------------------------------------------------

_IRREGULAR_PLURALS = {
    "people": "person",
    "men": "man",
    "women": "woman",
    "children": "child",
    "mice": "mouse",
    "teeth": "tooth",
    "feet": "foot",
    "geese": "goose",
}

_WORD = re.compile(r"[a-z0-9]+")


def _singular_forms(word: str) -> List[str]:
    forms = [word]
    if word in _IRREGULAR_PLURALS:
        forms.append(_IRREGULAR_PLURALS[word])
    if word.endswith("ies") and len(word) > 3:
        forms.append(word[:-3] + "y")
    if word.endswith("ves") and len(word) > 3:
        forms.extend((word[:-3] + "f", word[:-3] + "fe"))
    if word.endswith("es") and len(word) > 2:
        forms.append(word[:-2])
    if word.endswith("s") and not word.endswith("ss") and len(word) > 1:
        forms.append(word[:-1])
    return forms


def _phrase_key(phrase: str) -> str:
    return " ".join(_WORD.findall(phrase.lower()))


class ChairLexicon:
    """
    Object vocabulary with synonyms for hallucination counting.

    Matching is case-insensitive on word boundaries; multi-word names match
    longest first and the last word of a phrase may be plural.

    Args:
        vocabulary: Canonical object names
        synonyms: Canonical name to alternative surface forms
    """

    def __init__(
        self,
        vocabulary: Iterable[str],
        synonyms: Optional[Mapping[str, Iterable[str]]] = None,
    ):
        self.vocabulary: Set[str] = set()
        self.surface: Dict[str, str] = {}
        for name in vocabulary:
            key = _phrase_key(name)
            if not key:
                raise LexiconError(f"empty object name {name!r}")
            self.vocabulary.add(key)
            self.surface[key] = key

        for canonical, forms in (synonyms or {}).items():
            target = _phrase_key(canonical)
            if target not in self.vocabulary:
                raise LexiconError(
                    f"synonyms given for '{canonical}', which is not in the vocabulary"
                )
            for form in forms:
                key = _phrase_key(form)
                if self.surface.get(key, target) != target:
                    raise LexiconError(
                        f"'{form}' maps to both '{self.surface[key]}' and '{target}'"
                    )
                self.surface[key] = target
        self.max_words = max((len(key.split()) for key in self.surface), default=1)

    @classmethod
    def load(cls, path: Union[str, Path]) -> ChairLexicon:
        """
        Read a lexicon YAML file with ``vocabulary`` and optional ``synonyms``.

        Raises:
            LexiconError: Unreadable or inconsistent lexicon
        """
        try:
            with open(path, encoding="utf-8") as handle:
                data = yaml.safe_load(handle) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise LexiconError(f"cannot read lexicon {path}: {exc}") from exc
        vocabulary = data.get("vocabulary") if isinstance(data, dict) else None
        if not isinstance(vocabulary, list) or not vocabulary:
            raise LexiconError(f"{path}: lexicon needs a non-empty 'vocabulary' list")
        synonyms = data.get("synonyms") or {}
        if not isinstance(synonyms, dict):
            raise LexiconError(f"{path}: 'synonyms' must map names to lists")
        return cls(
            [str(v) for v in vocabulary],
            {str(k): [str(f) for f in (v or [])] for k, v in synonyms.items()},
        )

    @classmethod
    def default(cls) -> ChairLexicon:
        """The bundled 80-class object lexicon."""
        return cls.load(DEFAULT_LEXICON)

    def lookup(self, phrase: str) -> Optional[str]:
        """Canonical object for a phrase, folding a plural last word."""
        words = _phrase_key(phrase).split()
        if not words:
            return None
        head = " ".join(words[:-1])
        for form in _singular_forms(words[-1]):
            key = f"{head} {form}" if head else form
            if key in self.surface:
                return self.surface[key]
        return None

    def canonical(self, name: str) -> str:
        """
        Raises:
            LexiconError: If name is not a known object
        """
        found = self.lookup(name)
        if found is None:
            raise LexiconError(f"gold object '{name}' is not in the CHAIR vocabulary")
        return found

    def mentions(self, caption: str) -> List[str]:
        """Distinct canonical objects mentioned in a caption, in order of first mention."""
        words = _WORD.findall(caption.lower())
        found: List[str] = []
        i = 0
        while i < len(words):
            for n in range(min(self.max_words, len(words) - i), 0, -1):
                hit = self.lookup(" ".join(words[i:i + n]))
                if hit is not None:
                    if hit not in found:
                        found.append(hit)
                    i += n
                    break
            else:
                i += 1
        return found


@dataclass(frozen=True)
class CaptionVerdict:
    mentioned: Tuple[str, ...]
    hallucinated: Tuple[str, ...]
    length: int


@dataclass(frozen=True)
class ChairResult:
    chair_i: float
    chair_s: float
    length: float
    captions: Tuple[CaptionVerdict, ...] = ()


def score_chair(
    captions: Sequence[Tuple[str, Iterable[str]]], lexicon: ChairLexicon
) -> ChairResult:
    """
    Object-level (CHAIR_i) and sentence-level (CHAIR_s) hallucination rates.

    CHAIR_i is hallucinated over mentioned object instances (one instance per
    distinct object per caption), 0 when nothing is mentioned. CHAIR_s is the
    share of captions with any hallucinated object. Len is the mean
    whitespace-token count.

    Raises:
        LexiconError: A gold object is not in the lexicon
    """
    verdicts: List[CaptionVerdict] = []
    for caption, gold in captions:
        gold_set = {lexicon.canonical(name) for name in gold}
        mentioned = lexicon.mentions(caption)
        hallucinated = tuple(obj for obj in mentioned if obj not in gold_set)
        verdicts.append(CaptionVerdict(tuple(mentioned), hallucinated, len(caption.split())))

    if not verdicts:
        return ChairResult(0.0, 0.0, 0.0)
    mentioned_total = sum(len(v.mentioned) for v in verdicts)
    hallucinated_total = sum(len(v.hallucinated) for v in verdicts)
    return ChairResult(
        chair_i=hallucinated_total / mentioned_total if mentioned_total else 0.0,
        chair_s=sum(1 for v in verdicts if v.hallucinated) / len(verdicts),
        length=sum(v.length for v in verdicts) / len(verdicts),
        captions=tuple(verdicts),
    )


# -- evaluation runs -------------------------------------------------------------


@dataclass
class EvalReport:
    benchmark: str
    kind: str
    metrics: Dict[str, float] = field(default_factory=dict)
    verdicts: List[Dict[str, Any]] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)
    prompt: Optional[str] = None

    @property
    def headline(self) -> Tuple[str, float]:
        """The metric printed on the command line."""
        name = "chair_i" if self.kind == CHAIR else "accuracy"
        return name, self.metrics.get(name, 0.0)

    def to_json(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"benchmark": self.benchmark, "kind": self.kind}
        if self.prompt is not None:
            data["prompt"] = self.prompt
        data["metrics"] = dict(self.metrics)
        data["counts"] = dict(self.counts)
        data["verdicts"] = list(self.verdicts)
        return data

    def to_table(self) -> str:
        rows = [("benchmark", self.benchmark), ("kind", self.kind)]
        if self.prompt is not None:
            rows.append(("prompt", self.prompt))
        rows += [(name, f"{value:.4f}") for name, value in self.metrics.items()]
        rows += [(name, str(value)) for name, value in self.counts.items()]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows) + "\n"


def chair_prompt(benchmark: str) -> Optional[PromptParts]:
    """
    Caption prompt of a ``CHAIR-<variant>`` benchmark; None for plain ``CHAIR``.

    Raises:
        ConfigError: Unknown caption variant
    """
    name = benchmark.strip().lower()
    if name == CHAIR:
        return None
    return caption_prompt(name[len(CHAIR):].lstrip("-_ "))


def benchmark_kind(benchmark: str) -> str:
    """
    Scorer family for a benchmark name.

    Raises:
        ConfigError: No scorer for the benchmark
    """
    if benchmark.strip().lower().startswith(CHAIR):
        chair_prompt(benchmark)
        return CHAIR
    prompt = BENCHMARKS.get(benchmark)
    if prompt.identifier is TaskIdentifier.REFER:
        return REC
    if prompt.identifier in (TaskIdentifier.VQA, TaskIdentifier.IDENTIFY):
        return VQA
    raise ConfigError(f"no scorer for benchmark '{benchmark}'")


def _load_predictions(path: Union[str, Path]) -> Dict[str, Prediction]:
    predictions: Dict[str, Prediction] = {}
    for line_no, pred in iter_records(path, parse=Prediction.from_json):
        if pred.id in predictions:
            raise SchemaError(f"duplicate prediction id '{pred.id}'", str(path), line_no)
        predictions[pred.id] = pred
    return predictions


_GOLD_KINDS = {REC: BoxGold, VQA: AnswerGold, CHAIR: ObjectsGold}


def _eval_record(obj: Dict[str, Any], kind: str) -> CorpusRecord:
    rec = CorpusRecord.from_json(obj)
    expected = _GOLD_KINDS[kind]
    if not isinstance(rec.gold, expected):
        raise DataError(f"record {rec.id}: {kind} evaluation needs {expected.__name__} gold")
    return rec


def _instruction_text(parts: PromptParts) -> str:
    return f"{parts.identifier.surface} {parts.instruction}".strip()


def _asked_with(instruction: str, parts: PromptParts) -> bool:
    identifier, rest = split_identifier(instruction)
    return identifier is parts.identifier and rest.strip() == parts.instruction


def run_eval(
    eval_path: Union[str, Path],
    predictions_path: Union[str, Path],
    benchmark: str,
    iou_inclusive: bool = False,
    normalization: AnswerNormalization = DEFAULT_NORMALIZATION,
    lexicon: Optional[ChairLexicon] = None,
    run_logger: Optional[RunLogger] = None,
) -> EvalReport:
    """
    Score a predictions file against an evaluation set.

    Missing predictions count as incorrect (and are left out of CHAIR
    averages); predictions for unknown ids are logged and ignored.

    Raises:
        ConfigError: Unknown benchmark, unreadable files or a bad lexicon
        SchemaError: Malformed lines, duplicate record ids or duplicate prediction ids
    """
    kind = benchmark_kind(benchmark)
    run_logger = run_logger or RunLogger(f"eval {benchmark}")
    predictions = _load_predictions(predictions_path)
    if kind == CHAIR and lexicon is None:
        lexicon = ChairLexicon.default()
    prompt = chair_prompt(benchmark) if kind == CHAIR else None

    verdicts: List[Dict[str, Any]] = []
    captions: List[Tuple[str, Iterable[str]]] = []
    caption_ids: List[str] = []
    seen: Set[str] = set()
    correct = 0
    off_prompt = 0
    records = iter_records(eval_path, parse=lambda obj: _eval_record(obj, kind), on_error=FAIL)
    for line_no, rec in records:
        if rec.id in seen:
            raise SchemaError(f"duplicate record id '{rec.id}'", str(eval_path), line_no)
        seen.add(rec.id)
        pred = predictions.get(rec.id)
        if pred is None:
            run_logger.on_missing_prediction(rec.id)
            verdicts.append({"id": rec.id, "correct": False, "missing": True})
            continue

        if kind == CHAIR:
            if prompt is not None and not _asked_with(rec.instruction, prompt):
                logger.warning("Record {} was not captioned with the {} prompt", rec.id, benchmark)
                off_prompt += 1
            text = strip_grounding(parse_grounded_lenient(pred.output))
            captions.append((text, rec.gold.objects))  # type: ignore[union-attr]
            caption_ids.append(rec.id)
            continue
        if kind == REC:
            boxes = rec.gold.boxes  # type: ignore[union-attr]
            ok = score_rec(pred, boxes, inclusive=iou_inclusive)
        else:
            ok = score_vqa(pred, rec.gold.answers, normalization)  # type: ignore[union-attr]
        correct += ok
        verdicts.append({"id": rec.id, "correct": ok})

    extra = sorted(set(predictions) - seen)
    for record_id in extra:
        logger.warning("Prediction for unknown record {} ignored", record_id)

    total = len(seen)
    report = EvalReport(benchmark, kind)
    if prompt is not None:
        report.prompt = _instruction_text(prompt)
    report.counts = {
        "total": total,
        "missing": run_logger.missing,
        "extra": len(extra),
    }
    if kind == CHAIR:
        result = score_chair(captions, lexicon)  # type: ignore[arg-type]
        report.metrics = {
            "chair_i": result.chair_i,
            "chair_s": result.chair_s,
            "len": result.length,
        }
        for record_id, verdict in zip(caption_ids, result.captions):
            verdicts.append(
                {
                    "id": record_id,
                    "mentioned": list(verdict.mentioned),
                    "hallucinated": list(verdict.hallucinated),
                    "length": verdict.length,
                }
            )
        report.counts["scored"] = len(caption_ids)
        if prompt is not None:
            report.counts["off_prompt"] = off_prompt
    else:
        report.metrics = {"accuracy": correct / total if total else 0.0}
        report.counts["correct"] = correct
    report.verdicts = verdicts
    run_logger.on_complete({"benchmark": benchmark, **report.metrics})
    return report
