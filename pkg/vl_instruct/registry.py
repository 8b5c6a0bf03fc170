"""
Named registries for task identifiers, benchmark prompts and corpus transforms.
"""

from __future__ import annotations

from typing import Callable, Dict, Generic, Iterator, List, Optional, TypeVar

from loguru import logger

from vl_instruct.errors import RegistryError, UnknownEntryError

T = TypeVar("T")


def _identity(name: str) -> str:
    return name


class Registry(Generic[T]):
    """
    Registry mapping names to entries.

    Names pass through ``normalize`` before every lookup, so a registry built
    with ``str.lower`` is case-insensitive.

    Example:
        registry = Registry("benchmark", normalize=str.lower)
        registry.register("VSR", prompt)
        registry.get("vsr")
    """

    def __init__(self, kind: str, normalize: Optional[Callable[[str], str]] = None):
        """
        Initialize an empty registry.

        Args:
            kind: Human-readable entry kind used in error messages
            normalize: Optional key normalisation applied to every name
        """
        self.kind = kind
        self._normalize = normalize or _identity
        self._entries: Dict[str, T] = {}

    def register(self, name: str, entry: T, replace: bool = False) -> None:
        """
        Register an entry.

        Args:
            name: Unique identifier for the entry
            entry: The value to store
            replace: Overwrite an existing entry instead of rejecting it

        Raises:
            RegistryError: If name is already registered and replace is False
        """
        key = self._normalize(name)
        if key in self._entries and not replace:
            raise RegistryError(f"{self.kind} '{name}' is already registered")

        self._entries[key] = entry
        logger.debug("Registered {} '{}'", self.kind, name)

    def unregister(self, name: str) -> None:
        """
        Remove an entry if present.

        Args:
            name: The entry to remove
        """
        key = self._normalize(name)
        if key in self._entries:
            del self._entries[key]
            logger.debug("Unregistered {} '{}'", self.kind, name)

    def get(self, name: str) -> T:
        """
        Look up a registered entry.

        Raises:
            UnknownEntryError: If name is not registered
        """
        key = self._normalize(name)
        try:
            return self._entries[key]
        except KeyError:
            known = ", ".join(sorted(self._entries)) or "none"
            raise UnknownEntryError(
                f"unknown {self.kind} '{name}' (known: {known})"
            ) from None

    def find(self, name: str) -> Optional[T]:
        """Return the entry for name, or None."""
        return self._entries.get(self._normalize(name))

    def names(self) -> List[str]:
        """List registered (normalised) names in registration order."""
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, T]]:
        return iter(list(self._entries.items()))

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and self._normalize(name) in self._entries

    def __len__(self) -> int:
        return len(self._entries)
