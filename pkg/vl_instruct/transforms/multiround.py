"""
Multi-round conversation mixing over same-image records.
"""

from __future__ import annotations

from typing import Any, Dict, Iterable, Iterator, List, Tuple

from loguru import logger

from vl_instruct.corpus import CorpusRecord, build_multiround
from vl_instruct.errors import ConfigError
from vl_instruct.transforms.base import BaseTransform, JsonObj, register_transform


@register_transform
class MultiroundTransform(BaseTransform):
    """
    Mix single-round records into conversations.

    Needs the whole input, so it never runs sharded. Conversations are emitted
    first, in order of each image's first appearance, followed by every
    record that was not used, in input order.
    """

    name = "multiround"
    stateless = False

    def __init__(self, turns: int = 3, seed: int = 0, **options: Any) -> None:
        super().__init__(**options)
        if turns < 2:
            raise ConfigError(f"turns must be at least 2, got {turns}")
        self.turns = turns
        self.seed = seed

    def apply(self, obj: JsonObj) -> List[JsonObj]:
        # a lone record can only pass through
        return [self.parse(obj).to_json()]

    def parse(self, obj: JsonObj) -> CorpusRecord:
        return CorpusRecord.from_json(obj)

    def run(self, items: Iterable[Tuple[int, Any]]) -> Iterator[List[JsonObj]]:
        records = [rec for _, rec in items]
        result = build_multiround(records, self.turns, self.seed)
        logger.info(
            "Built {} conversation(s) from {} record(s); {} passed through",
            len(result.conversations),
            len(records),
            len(result.passthrough),
        )
        yield [conv.to_json() for conv in result.conversations]
        yield [rec.to_json() for rec in result.passthrough]

    def options(self) -> Dict[str, Any]:
        return {"turns": self.turns, "seed": self.seed}
