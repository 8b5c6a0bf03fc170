"""
The multi-task instruction template.

A full prompt looks like::

    [INST] <Img><ImageHere></Img> [vqa] What is the color? [/INST]

``[INST]``/``[/INST]`` frame the user turn, ``<Img>…</Img>`` holds a splice
marker for image features, and an optional task identifier token tells the
model which task it is doing. Vision-irrelevant instructions carry neither
image nor identifier.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import yaml
from loguru import logger

from vl_instruct.errors import (
    ConfigError,
    ImageTagError,
    PromptDelimiterError,
    UnknownIdentifierError,
    ValidationError,
    byte_offset,
)
from vl_instruct.registry import Registry

DEFAULT_IMAGE_SLOT = "<ImageHere>"
QUESTION_HOLE = "{question}"

INST_OPEN = "[INST]"
INST_CLOSE = "[/INST]"
IMG_OPEN = "<Img>"
IMG_CLOSE = "</Img>"

_BRACKET_TOKEN = re.compile(r"\[[^\[\]\s]*\]")


class TaskIdentifier(str, Enum):
    """Task identifier tokens; NONE marks a vision-irrelevant instruction."""

    VQA = "[vqa]"
    CAPTION = "[caption]"
    GROUNDING = "[grounding]"
    REFER = "[refer]"
    IDENTIFY = "[identify]"
    DETECTION = "[detection]"
    NONE = ""

    @property
    def surface(self) -> str:
        return self.value

    @property
    def short_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> TaskIdentifier:
        """
        Accept ``vqa``, ``VQA``, ``[vqa]``, ``none`` or the empty string.

        Raises:
            UnknownEntryError: If no identifier has that name
        """
        key = name.strip()
        if key == "" or key.lower() == "none":
            return cls.NONE
        return IDENTIFIERS.get(key if key.startswith("[") else f"[{key.lower()}]")


# Surface form -> identifier. Duplicate surface forms are rejected.
IDENTIFIERS: Registry[TaskIdentifier] = Registry("task identifier")


def register_identifier(surface: str, identifier: TaskIdentifier) -> None:
    """Register a surface form for an identifier."""
    if not _BRACKET_TOKEN.fullmatch(surface):
        raise ConfigError(f"identifier surface form must be a bracketed token: {surface!r}")
    IDENTIFIERS.register(surface, identifier)


for _identifier in TaskIdentifier:
    if _identifier is not TaskIdentifier.NONE:
        register_identifier(_identifier.surface, _identifier)


def match_identifier(
    text: str, pos: int = 0, end: Optional[int] = None
) -> Optional[Tuple[TaskIdentifier, int]]:
    """Longest registered surface form starting at ``text[pos]``, with its end index."""
    end = len(text) if end is None else end
    for surface in sorted(IDENTIFIERS.names(), key=len, reverse=True):
        if text.startswith(surface, pos, end):
            return IDENTIFIERS.get(surface), pos + len(surface)
    return None


def split_identifier(instruction: str) -> Tuple[TaskIdentifier, str]:
    """Split a leading identifier token off an instruction."""
    stripped = instruction.lstrip()
    matched = match_identifier(stripped)
    if matched is None:
        return TaskIdentifier.NONE, instruction
    identifier, end = matched
    return identifier, stripped[end:].lstrip()


@dataclass(frozen=True)
class PromptParts:
    """The three user-turn parts: image slot, identifier, instruction."""

    instruction: str
    identifier: TaskIdentifier = TaskIdentifier.NONE
    has_image: bool = True
    image_slot: str = DEFAULT_IMAGE_SLOT

    def __post_init__(self) -> None:
        instruction = self.instruction.strip()
        object.__setattr__(self, "instruction", instruction)
        object.__setattr__(self, "identifier", TaskIdentifier(self.identifier))

        if not instruction:
            raise ValidationError("instruction must be non-empty")
        if not self.has_image and self.identifier is not TaskIdentifier.NONE:
            raise ValidationError(
                f"identifier {self.identifier.surface} requires an image; "
                "vision-irrelevant instructions carry no identifier"
            )
        if IMG_OPEN in self.image_slot or IMG_CLOSE in self.image_slot:
            raise ValidationError("image slot may not contain <Img> or </Img>")
        if self.identifier is TaskIdentifier.NONE and _BRACKET_TOKEN.match(instruction):
            raise ValidationError(
                "instruction without identifier may not start with a bracketed token"
            )
        if not self.has_image and instruction.startswith((IMG_OPEN, IMG_CLOSE)):
            raise ValidationError(
                "instruction without image may not start with <Img> or </Img>"
            )


@dataclass(frozen=True)
class PromptTemplate:
    """
    Renderer and parser for the instruction template.

    Args:
        image_slot: Placeholder text spliced between <Img> and </Img>
        separator: Whitespace between </Img> and the next segment
    """

    image_slot: str = DEFAULT_IMAGE_SLOT
    separator: str = " "

    def __post_init__(self) -> None:
        if not self.separator or self.separator.strip():
            raise ConfigError(f"separator must be non-empty whitespace, got {self.separator!r}")

    def parts(
        self,
        instruction: str,
        identifier: TaskIdentifier = TaskIdentifier.NONE,
        has_image: bool = True,
    ) -> PromptParts:
        return PromptParts(instruction, identifier, has_image, self.image_slot)

    def render(self, p: PromptParts, with_identifier: bool = True) -> str:
        out = INST_OPEN
        if p.has_image:
            out += f" {IMG_OPEN}{p.image_slot}{IMG_CLOSE}{self.separator}"
        else:
            out += " "
        if with_identifier and p.identifier is not TaskIdentifier.NONE:
            out += p.identifier.surface + " "
        return f"{out}{p.instruction} {INST_CLOSE}"

    def render_conversation(
        self,
        turns: Sequence[Tuple[TaskIdentifier, str, str]],
        with_identifiers: bool = True,
    ) -> Tuple[str, str]:
        """
        Render a multi-round conversation.

        The image appears in the first turn only. Every answer but the last is
        inlined after its ``[/INST]``; the last answer is returned as the target.

        Args:
            turns: ``(identifier, instruction, answer)`` per round, at least one

        Returns:
            ``(prompt, target)``
        """
        if not turns:
            raise ValidationError("a conversation needs at least one turn")

        pieces: List[str] = []
        for index, (identifier, instruction, answer) in enumerate(turns):
            if index == 0:
                first = self.parts(instruction, identifier, has_image=True)
                pieces.append(self.render(first, with_identifier=with_identifiers))
            else:
                head = INST_OPEN + " "
                if with_identifiers and identifier is not TaskIdentifier.NONE:
                    head += identifier.surface + " "
                pieces.append(f"{head}{instruction.strip()} {INST_CLOSE}")
            if index < len(turns) - 1:
                pieces.append(f" {answer} ")
        return "".join(pieces), turns[-1][2]


DEFAULT_TEMPLATE = PromptTemplate()


def _skip_spaces(s: str, pos: int, end: int) -> int:
    while pos < end and s[pos].isspace():
        pos += 1
    return pos


def render_prompt(p: PromptParts, template: Optional[PromptTemplate] = None) -> str:
    """Render prompt parts as ``[INST] <Img>SLOT</Img> IDENT INSTRUCTION [/INST]``."""
    return (template or DEFAULT_TEMPLATE).render(p)


def parse_prompt(s: str) -> PromptParts:
    """
    Parse a rendered prompt back into its parts.

    Runs of whitespace between segments are accepted and canonicalised.

    Raises:
        PromptDelimiterError: Missing [INST] or [/INST]
        ImageTagError: Unbalanced <Img> tags
        UnknownIdentifierError: Bracketed token in identifier position that is
            not a registered identifier
        ValidationError: The parts violate PromptParts invariants
    """
    start = _skip_spaces(s, 0, len(s))
    if not s.startswith(INST_OPEN, start):
        raise PromptDelimiterError("missing [INST]", byte_offset(s, start))
    pos = start + len(INST_OPEN)

    end = len(s.rstrip())
    if end - len(INST_CLOSE) < pos or not s.startswith(INST_CLOSE, end - len(INST_CLOSE)):
        raise PromptDelimiterError("missing [/INST]", byte_offset(s, end))
    body_end = end - len(INST_CLOSE)

    pos = _skip_spaces(s, pos, body_end)
    has_image = False
    image_slot = DEFAULT_IMAGE_SLOT
    if s.startswith(IMG_OPEN, pos, body_end):
        close = s.find(IMG_CLOSE, pos + len(IMG_OPEN), body_end)
        if close == -1:
            raise ImageTagError("<Img> without </Img>", byte_offset(s, pos))
        image_slot = s[pos + len(IMG_OPEN):close]
        nested = image_slot.find(IMG_OPEN)
        if nested != -1:
            raise ImageTagError(
                "nested <Img>", byte_offset(s, pos + len(IMG_OPEN) + nested)
            )
        has_image = True
        pos = close + len(IMG_CLOSE)
    elif s.startswith(IMG_CLOSE, pos, body_end):
        raise ImageTagError("</Img> without <Img>", byte_offset(s, pos))

    pos = _skip_spaces(s, pos, body_end)
    identifier = TaskIdentifier.NONE
    matched = match_identifier(s, pos, body_end)
    if matched is not None:
        identifier, pos = matched
    else:
        token = _BRACKET_TOKEN.match(s, pos, body_end)
        if token is not None:
            raise UnknownIdentifierError(
                f"unknown task identifier {token.group()}", byte_offset(s, pos)
            )

    instruction = s[pos:body_end].strip()
    return PromptParts(instruction, identifier, has_image, image_slot)


@dataclass(frozen=True)
class BenchmarkPrompt:
    """A per-benchmark evaluation instruction with one ``{question}`` hole."""

    name: str
    template: str
    identifier: TaskIdentifier

    def __post_init__(self) -> None:
        holes = self.template.count(QUESTION_HOLE)
        if holes != 1:
            raise ConfigError(
                f"benchmark '{self.name}' template must contain exactly one "
                f"{QUESTION_HOLE} hole, found {holes}"
            )
        leading, _ = split_identifier(self.template)
        if leading is not TaskIdentifier(self.identifier):
            raise ConfigError(
                f"benchmark '{self.name}' template starts with "
                f"{leading.surface or 'no identifier'}, expected "
                f"{self.identifier.surface or 'no identifier'}"
            )

    def render(self, question: str) -> str:
        return self.template.replace(QUESTION_HOLE, question)

    def extract_question(self, text: str) -> Optional[str]:
        """Recover the hole content from a rendered instruction, or None."""
        prefix, suffix = self.template.split(QUESTION_HOLE)
        if len(text) < len(prefix) + len(suffix):
            return None
        if not (text.startswith(prefix) and text.endswith(suffix)):
            return None
        return text[len(prefix):len(text) - len(suffix)]


_REC_TEMPLATE = "[refer] give me the location of {question}"
_SHORT_ANSWER_TEMPLATE = (
    "[vqa] Based on the image, respond to this question with a single word or "
    "phrase: {question}"
)

_DEFAULT_BENCHMARKS: Dict[str, str] = {
    "REC": _REC_TEMPLATE,
    "RefCOCO": _REC_TEMPLATE,
    "RefCOCO+": _REC_TEMPLATE,
    "RefCOCOg": _REC_TEMPLATE,
    "REG": "[identify] what is in this location {question}",
    "VQA": "[vqa] {question}",
    "VizWiz": (
        "[vqa] Based on the image, respond to this question with a single word or "
        "phrase: {question}, and reply 'unanswerable' when the provided "
        "information is insufficient"
    ),
    "HatefulMemes": (
        "[vqa] This is an image with: {question} written on it. Is it hateful? Answer:"
    ),
    "VSR": "[vqa] Based on the image, is this statement true or false? {question}",
    "IconQA": _SHORT_ANSWER_TEMPLATE,
    "GQA": _SHORT_ANSWER_TEMPLATE,
    "OKVQA": _SHORT_ANSWER_TEMPLATE,
}

BENCHMARKS: Registry[BenchmarkPrompt] = Registry("benchmark", normalize=str.lower)


def register_benchmark(
    name: str,
    template: str,
    identifier: Optional[TaskIdentifier] = None,
    replace: bool = False,
) -> BenchmarkPrompt:
    """
    Register an evaluation prompt.

    Args:
        name: Benchmark name, matched case-insensitively
        template: Instruction text with one {question} hole
        identifier: Task identifier; read off the template when omitted
        replace: Override an existing entry
    """
    if identifier is None:
        identifier, _ = split_identifier(template)
    prompt = BenchmarkPrompt(name, template, identifier)
    BENCHMARKS.register(name, prompt, replace=replace)
    return prompt


for _name, _template in _DEFAULT_BENCHMARKS.items():
    register_benchmark(_name, _template)


def load_benchmark_prompts(path: Union[str, Path]) -> List[BenchmarkPrompt]:
    """
    Load extra or overriding benchmark prompts from YAML.

    The file maps benchmark names to ``{template: ..., identifier: ...}``;
    ``identifier`` is optional. Loaded entries replace built-in ones.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read benchmark prompts from {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of benchmark name to template")

    loaded = []
    for name, entry in data.items():
        if isinstance(entry, str):
            entry = {"template": entry}
        if not isinstance(entry, dict) or "template" not in entry:
            raise ConfigError(f"{path}: benchmark '{name}' needs a template")
        identifier = entry.get("identifier")
        ident = TaskIdentifier.from_name(identifier) if identifier is not None else None
        loaded.append(register_benchmark(str(name), entry["template"], ident, replace=True))
    logger.info("Loaded {} benchmark prompt(s) from {}", len(loaded), path)
    return loaded


def get_benchmark(benchmark: str) -> BenchmarkPrompt:
    return BENCHMARKS.get(benchmark)


def benchmark_prompt(benchmark: str, question: str) -> str:
    """
    Fill a registered benchmark template.

    Raises:
        UnknownEntryError: If the benchmark is not registered
    """
    return BENCHMARKS.get(benchmark).render(question)


# Caption instructions compared in hallucination evaluation.
CAPTION_PROMPTS: Dict[str, Tuple[TaskIdentifier, str]] = {
    "long": (TaskIdentifier.NONE, "generate a brief description of the given image"),
    "grounded": (TaskIdentifier.GROUNDING, "describe this image in as detailed as possible"),
    "short": (TaskIdentifier.CAPTION, "briefly describe the image"),
}


def caption_prompt(variant: str, template: Optional[PromptTemplate] = None) -> PromptParts:
    """Prompt parts for a caption variant: ``long``, ``grounded`` or ``short``."""
    try:
        identifier, instruction = CAPTION_PROMPTS[variant]
    except KeyError:
        raise ConfigError(
            f"unknown caption variant '{variant}' (known: {', '.join(CAPTION_PROMPTS)})"
        ) from None
    return (template or DEFAULT_TEMPLATE).parts(instruction, identifier, has_image=True)
