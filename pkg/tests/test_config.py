"""Tests for settings loading and environment overrides."""

import pytest

from vl_instruct.config import Settings
from vl_instruct.errors import ConfigError
from vl_instruct.geometry import RoundingMode
from vl_instruct.grammar import DEFAULT_TEMPLATE, PromptTemplate


class TestSettingsDefaults:
    """Test the built-in defaults."""

    def test_defaults(self):
        """Test an empty environment gives the defaults."""
        settings = Settings.load(environ={})
        assert settings.rounding is RoundingMode.HALF_UP
        assert settings.template() == DEFAULT_TEMPLATE
        assert settings.metrics.iou_inclusive is False
        assert settings.metrics.normalize.drop_articles is True
        assert settings.logging.level == "INFO"

    def test_digest_is_stable(self):
        """Test equal settings hash equally."""
        assert Settings.load(environ={}).digest() == Settings().digest()
        assert len(Settings().digest()) == 64


class TestSettingsFile:
    """Test YAML settings files."""

    def test_file_values(self, tmp_path):
        """Test values read from a file."""
        path = tmp_path / "settings.yaml"
        path.write_text(
            "geometry:\n  rounding: floor\n"
            "grammar:\n  image_slot: <ImageFeature>\n"
            "metrics:\n  iou_inclusive: true\n  normalize:\n    drop_articles: false\n",
            encoding="utf-8",
        )
        settings = Settings.load(path, environ={})
        assert settings.rounding is RoundingMode.FLOOR
        assert settings.template() == PromptTemplate(image_slot="<ImageFeature>")
        assert settings.metrics.iou_inclusive is True
        assert settings.metrics.normalize.drop_articles is False
        assert settings.digest() != Settings().digest()

    def test_empty_file(self, tmp_path):
        """Test an empty file means defaults."""
        path = tmp_path / "settings.yaml"
        path.write_text("", encoding="utf-8")
        assert Settings.load(path, environ={}) == Settings()

    @pytest.mark.parametrize(
        "body",
        [
            "- 1\n",
            "colour: red\n",
            "geometry:\n  precision: 3\n",
            "geometry:\n  rounding: nearest\n",
            "metrics:\n  iou_inclusive: maybe\n",
            "grammar:\n  separator: '-'\n",
            "logging:\n  level: LOUD\n",
            "geometry: floor\n",
        ],
    )
    def test_invalid_files(self, tmp_path, body):
        """Test bad keys and values are config errors."""
        path = tmp_path / "settings.yaml"
        path.write_text(body, encoding="utf-8")
        with pytest.raises(ConfigError):
            Settings.load(path, environ={})

    def test_missing_file(self, tmp_path):
        """Test an unreadable file is a config error."""
        with pytest.raises(ConfigError):
            Settings.load(tmp_path / "missing.yaml", environ={})


class TestEnvironmentOverrides:
    """Test VLI_<SECTION>__<KEY> overrides."""

    def test_override_file_value(self, tmp_path):
        """Test the environment wins over the file."""
        path = tmp_path / "settings.yaml"
        path.write_text("geometry:\n  rounding: floor\n", encoding="utf-8")
        settings = Settings.load(path, environ={"VLI_GEOMETRY__ROUNDING": "ceil"})
        assert settings.rounding is RoundingMode.CEIL

    def test_nested_and_typed(self):
        """Test nested keys and YAML scalar typing."""
        settings = Settings.load(
            environ={
                "VLI_METRICS__NORMALIZE__DROP_ARTICLES": "false",
                "VLI_METRICS__IOU_INCLUSIVE": "true",
                "VLI_LOGGING__LEVEL": "debug",
            }
        )
        assert settings.metrics.normalize.drop_articles is False
        assert settings.metrics.iou_inclusive is True
        assert settings.logging.level == "debug"

    def test_unrelated_variables_ignored(self):
        """Test variables without the prefix or a section separator are ignored."""
        settings = Settings.load(environ={"HOME": "/root", "VLI_SEED": "3"})
        assert settings == Settings()

    def test_unknown_override(self):
        """Test an override for an unknown key fails."""
        with pytest.raises(ConfigError):
            Settings.load(environ={"VLI_GEOMETRY__PRECISION": "3"})
