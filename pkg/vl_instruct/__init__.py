"""
vl-instruct
Multi-task vision-language instruction compiler and evaluation harness.
"""

from vl_instruct.geometry import NormBox, PixelBox, normalize_box, parse_box, serialize_box
from vl_instruct.grammar import PromptParts, TaskIdentifier, parse_prompt, render_prompt
from vl_instruct.markup import GroundedText, emit_grounded, parse_grounded
from vl_instruct.registry import Registry

__version__ = "0.1.0"

__all__ = [
    "NormBox",
    "PixelBox",
    "normalize_box",
    "parse_box",
    "serialize_box",
    "PromptParts",
    "TaskIdentifier",
    "parse_prompt",
    "render_prompt",
    "GroundedText",
    "emit_grounded",
    "parse_grounded",
    "Registry",
]
