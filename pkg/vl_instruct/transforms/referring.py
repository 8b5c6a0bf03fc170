"""
Referring-expression transforms: raw REC annotations to records, and REC/REG inversion.
"""

from __future__ import annotations

from typing import Any, Dict, List

from vl_instruct.corpus import CorpusRecord, invert_to_reg, rec_records_from_annotation
from vl_instruct.errors import ConfigError
from vl_instruct.geometry import RoundingMode
from vl_instruct.transforms.base import BaseTransform, JsonObj, register_transform


@register_transform
class RecTransform(BaseTransform):
    """
    Build ``[refer]`` records from pixel-space annotations.

    Input lines look like::

        {"id": "r1", "image": "coco/1.jpg", "image_size": [448, 448],
         "phrase": "person wearing a red jacket", "boxes": [[112, 112, 336, 336]]}
    """

    name = "rec"

    def __init__(self, rounding: str = RoundingMode.HALF_UP.value, **options: Any) -> None:
        super().__init__(**options)
        try:
            self.rounding = RoundingMode(rounding)
        except ValueError:
            raise ConfigError(f"unknown rounding mode '{rounding}'") from None

    def apply(self, obj: JsonObj) -> List[JsonObj]:
        return [rec.to_json() for rec in rec_records_from_annotation(obj, self.rounding)]

    def options(self) -> Dict[str, Any]:
        return {"rounding": self.rounding.value}


@register_transform
class RegTransform(BaseTransform):
    """Invert ``[refer]`` records into ``[identify]`` records (and back)."""

    name = "reg"

    def apply(self, obj: JsonObj) -> List[JsonObj]:
        return [invert_to_reg(CorpusRecord.from_json(obj)).to_json()]
