"""
Grounded-caption transforms: caption selection and object parsing records.
"""

from __future__ import annotations

from typing import Any, Dict, List

from vl_instruct.corpus import (
    MIN_GROUNDED_PHRASES,
    DetectionMode,
    caption_from_annotation,
    make_detection_records,
    make_grounded_caption_record,
    select_grounded_captions,
)
from vl_instruct.errors import ConfigError
from vl_instruct.transforms.base import BaseTransform, JsonObj, register_transform


@register_transform
class GroundedSelectTransform(BaseTransform):
    """
    Keep detailed grounded captions and turn them into ``[grounding]`` records.

    Captions with fewer than ``min_phrases`` grounded phrases are dropped.
    """

    name = "grounded-select"

    def __init__(self, min_phrases: int = MIN_GROUNDED_PHRASES, **options: Any) -> None:
        super().__init__(**options)
        if min_phrases < 1:
            raise ConfigError(f"min_phrases must be at least 1, got {min_phrases}")
        self.min_phrases = min_phrases

    def apply(self, obj: JsonObj) -> List[JsonObj]:
        record_id, image, caption, source = caption_from_annotation(obj)
        return [
            make_grounded_caption_record(kept, image, record_id, source).to_json()
            for kept in select_grounded_captions([caption], self.min_phrases)
        ]

    def options(self) -> Dict[str, Any]:
        return {"min_phrases": self.min_phrases}


@register_transform
class DetectionTransform(BaseTransform):
    """Build ``[detection]`` records from grounded captions."""

    name = "detection"

    def __init__(self, mode: str = DetectionMode.CAPTION_TO_PHRASES.value, **options: Any) -> None:
        super().__init__(**options)
        try:
            self.mode = DetectionMode(mode)
        except ValueError:
            known = ", ".join(m.value for m in DetectionMode)
            raise ConfigError(f"detection mode must be one of {known}, got '{mode}'") from None

    def apply(self, obj: JsonObj) -> List[JsonObj]:
        record_id, image, caption, source = caption_from_annotation(obj)
        records = make_detection_records(caption, self.mode, image, record_id, source)
        return [rec.to_json() for rec in records]

    def options(self) -> Dict[str, Any]:
        return {"mode": self.mode.value}
