"""
Base class for corpus transforms run by ``vl-instruct compile``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any, Dict, Iterable, Iterator, List, Tuple, Type, TypeVar

from vl_instruct.errors import ConfigError
from vl_instruct.registry import Registry

JsonObj = Dict[str, Any]


class BaseTransform(ABC):
    """
    A record-to-records map over decoded JSONL objects.

    Stateless transforms implement ``apply`` and may be sharded across worker
    processes. Transforms that need the whole input (grouping, mixing) set
    ``stateless = False`` and override ``run``.

    Example:
        @register_transform
        class Upper(BaseTransform):
            name = "upper"

            def apply(self, obj):
                return [{**obj, "target": obj["target"].upper()}]
    """

    name: str = ""
    stateless: bool = True

    def __init__(self, **options: Any) -> None:
        if options:
            raise ConfigError(
                f"transform '{self.name}' got unexpected option(s): {', '.join(sorted(options))}"
            )

    @abstractmethod
    def apply(self, obj: JsonObj) -> List[JsonObj]:
        """
        Transform one input object.

        Args:
            obj: Decoded JSONL object

        Returns:
            Zero or more output objects, in output order

        Raises:
            DataError: If the input does not fit the transform's schema
        """
        raise NotImplementedError("apply() must be implemented")

    def parse(self, obj: JsonObj) -> Any:
        """Input converter used while reading; errors here are reported with line numbers."""
        return obj

    def run(self, items: Iterable[Tuple[int, Any]]) -> Iterator[List[JsonObj]]:
        """Map ``apply`` over ``(line_number, parsed)`` pairs, one result list per input."""
        for _, obj in items:
            yield self.apply(obj)

    def options(self) -> Dict[str, Any]:
        """Constructor options, recorded in the run manifest and sent to workers."""
        return {}


TRANSFORMS: Registry[Type[BaseTransform]] = Registry("transform")

T = TypeVar("T", bound=Type[BaseTransform])


def register_transform(cls: T) -> T:
    """Class decorator adding a transform to the global registry under ``cls.name``."""
    if not cls.name:
        raise ConfigError(f"{cls.__name__} needs a non-empty name")
    TRANSFORMS.register(cls.name, cls)
    return cls


def create_transform(name: str, **options: Any) -> BaseTransform:
    """
    Instantiate a registered transform.

    Raises:
        UnknownEntryError: If no transform has that name
        ConfigError: Bad options
    """
    return TRANSFORMS.get(name)(**options)


def list_transforms() -> List[str]:
    return TRANSFORMS.names()
