"""Corpus transforms available to ``vl-instruct compile``."""

from vl_instruct.transforms.base import (
    TRANSFORMS,
    BaseTransform,
    create_transform,
    list_transforms,
    register_transform,
)
from vl_instruct.transforms.grounding import DetectionTransform, GroundedSelectTransform
from vl_instruct.transforms.multiround import MultiroundTransform
from vl_instruct.transforms.referring import RecTransform, RegTransform
from vl_instruct.transforms.runner import TransformRunner

__all__ = [
    "TRANSFORMS",
    "BaseTransform",
    "create_transform",
    "list_transforms",
    "register_transform",
    "RecTransform",
    "RegTransform",
    "GroundedSelectTransform",
    "DetectionTransform",
    "MultiroundTransform",
    "TransformRunner",
]
