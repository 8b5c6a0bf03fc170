"""Tests for Registry."""

import pytest

from vl_instruct.errors import ConfigError, RegistryError, UnknownEntryError
from vl_instruct.registry import Registry


class TestRegistryBasics:
    """Test basic Registry functionality."""

    def test_registry_initialization(self):
        """Test registry starts empty."""
        registry = Registry("thing")
        assert len(registry) == 0
        assert registry.names() == []

    def test_register_and_get(self):
        """Test registering and looking up an entry."""
        registry = Registry("thing")
        registry.register("a", 1)
        assert registry.get("a") == 1
        assert "a" in registry

    def test_names_keep_registration_order(self):
        """Test names are listed in registration order."""
        registry = Registry("thing")
        for name in ("b", "a", "c"):
            registry.register(name, name)
        assert registry.names() == ["b", "a", "c"]
        assert list(registry.items()) == [("b", "b"), ("a", "a"), ("c", "c")]

    def test_find_returns_none(self):
        """Test find on a missing name."""
        assert Registry("thing").find("x") is None


class TestRegistryErrors:
    """Test registry error handling."""

    def test_duplicate_registration(self):
        """Test registering a name twice fails."""
        registry = Registry("thing")
        registry.register("a", 1)
        with pytest.raises(RegistryError, match="already registered"):
            registry.register("a", 2)

    def test_replace(self):
        """Test replace=True overwrites."""
        registry = Registry("thing")
        registry.register("a", 1)
        registry.register("a", 2, replace=True)
        assert registry.get("a") == 2

    def test_unknown_lists_known_names(self):
        """Test unknown lookups name the registered entries."""
        registry = Registry("benchmark")
        registry.register("vsr", 1)
        with pytest.raises(UnknownEntryError) as exc_info:
            registry.get("gqa")
        assert str(exc_info.value) == "unknown benchmark 'gqa' (known: vsr)"

    def test_errors_are_config_errors(self):
        """Test both registry errors share the ConfigError base."""
        assert issubclass(RegistryError, ConfigError)
        assert issubclass(UnknownEntryError, ConfigError)
        assert issubclass(UnknownEntryError, KeyError)

    def test_unregister(self):
        """Test removing entries, including missing ones."""
        registry = Registry("thing")
        registry.register("a", 1)
        registry.unregister("a")
        registry.unregister("a")
        assert "a" not in registry


class TestNormalizedRegistry:
    """Test key normalisation."""

    def test_case_insensitive(self):
        """Test a lower-casing registry matches any case."""
        registry = Registry("benchmark", normalize=str.lower)
        registry.register("RefCOCO", 1)
        assert registry.get("REFCOCO") == 1
        assert registry.names() == ["refcoco"]
        with pytest.raises(RegistryError):
            registry.register("refcoco", 2)

    def test_contains_non_string(self):
        """Test membership of non-strings is False."""
        assert 3 not in Registry("thing")
