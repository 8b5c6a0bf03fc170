"""
Tool settings loaded from YAML with environment overrides.

Every key is optional. A settings file looks like::

    geometry:
      rounding: half_up
    grammar:
      image_slot: <ImageHere>
      benchmarks_file: prompts.yaml
    metrics:
      iou_inclusive: false
      normalize:
        drop_articles: true
    logging:
      level: INFO
      json: false

Any key can be overridden with ``VLI_<SECTION>__<KEY>`` (nested keys add
another ``__``), e.g. ``VLI_GEOMETRY__ROUNDING=floor``. Override values are
read as YAML scalars, so ``false`` and ``0.5`` keep their types.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml

from vl_instruct.errors import ConfigError
from vl_instruct.geometry import RoundingMode
from vl_instruct.grammar import DEFAULT_IMAGE_SLOT, PromptTemplate
from vl_instruct.logger import LEVELS

ENV_PREFIX = "VLI_"


@dataclass
class GeometrySettings:
    rounding: str = RoundingMode.HALF_UP.value

    def validate(self) -> None:
        try:
            RoundingMode(self.rounding)
        except ValueError:
            known = ", ".join(mode.value for mode in RoundingMode)
            raise ConfigError(
                f"geometry.rounding must be one of {known}, got '{self.rounding}'"
            ) from None


@dataclass
class GrammarSettings:
    image_slot: str = DEFAULT_IMAGE_SLOT
    separator: str = " "
    benchmarks_file: Optional[str] = None

    def validate(self) -> None:
        PromptTemplate(self.image_slot, self.separator)


@dataclass
class NormalizeSettings:
    lowercase: bool = True
    strip_punctuation: bool = True
    collapse_whitespace: bool = True
    drop_articles: bool = True

    def validate(self) -> None:
        pass


@dataclass
class MetricsSettings:
    iou_inclusive: bool = False
    normalize: NormalizeSettings = field(default_factory=NormalizeSettings)
    lexicon_file: Optional[str] = None

    def validate(self) -> None:
        self.normalize.validate()


@dataclass
class LoggingSettings:
    level: str = "INFO"
    json: bool = False

    def validate(self) -> None:
        if self.level.upper() not in LEVELS:
            raise ConfigError(f"logging.level must be one of {', '.join(LEVELS)}")


@dataclass
class Settings:
    geometry: GeometrySettings = field(default_factory=GeometrySettings)
    grammar: GrammarSettings = field(default_factory=GrammarSettings)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)
    logging: LoggingSettings = field(default_factory=LoggingSettings)

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> Settings:
        """
        Resolve settings from defaults, an optional YAML file and the environment.

        Raises:
            ConfigError: Unreadable file, unknown keys or bad values
        """
        data: Dict[str, Any] = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as handle:
                    data = yaml.safe_load(handle) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read settings from {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: settings must be a mapping")

        _apply_env(data, os.environ if environ is None else environ)
        settings = _build(cls, data, "")
        settings.validate()
        return settings

    def validate(self) -> None:
        for section in (self.geometry, self.grammar, self.metrics, self.logging):
            section.validate()

    def template(self) -> PromptTemplate:
        return PromptTemplate(self.grammar.image_slot, self.grammar.separator)

    @property
    def rounding(self) -> RoundingMode:
        return RoundingMode(self.geometry.rounding)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved settings."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _apply_env(data: Dict[str, Any], environ: Mapping[str, str]) -> None:
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX):].split("__")]
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{name}: '{part}' is not a settings section")
            node = child
        try:
            node[path[-1]] = yaml.safe_load(raw) if raw else raw
        except yaml.YAMLError as exc:
            raise ConfigError(f"{name}: cannot parse value {raw!r}") from exc


def _build(kind: Any, data: Any, prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'settings'} must be a mapping")
    known = {f.name: f for f in fields(kind)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f" in {prefix}" if prefix else ""
        raise ConfigError(f"unknown settings key(s){where}: {', '.join(unknown)}")

    values: Dict[str, Any] = {}
    defaults = kind()
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        default = getattr(defaults, name)
        if is_dataclass(default):
            values[name] = _build(type(default), value, key)
        else:
            values[name] = _coerce(key, value, default, known[name].type)
    return kind(**values)


def _coerce(key: str, value: Any, default: Any, annotation: Any) -> Any:
    optional = "Optional" in str(annotation)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} may not be empty")
    expected = bool if isinstance(default, bool) else str
    if expected is bool and not isinstance(value, bool):
        raise ConfigError(f"{key} must be true or false, got {value!r}")
    if expected is str:
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key} must be a string")
        value = str(value)
    return value
