"""Tests for settings loading: YAML file, environment overlay and validation."""

import json
import logging
from pathlib import Path

import pytest
from pydantic import ValidationError

from scanloop.common.config import ScanloopSettings, get_settings, load_settings
from scanloop.common.logging import JSONFormatter, setup_logging

CONFIG_DIR = Path(__file__).resolve().parents[2] / "config"


class TestDefaults:
    def test_default_file_matches_code_defaults(self):
        loaded = load_settings(CONFIG_DIR / "default.yaml")
        assert loaded.model_dump() == ScanloopSettings().model_dump()

    def test_toy_profile_loads(self):
        toy = load_settings(CONFIG_DIR / "toy.yaml")
        assert toy.backbone.cells == [0.5, 1.0, 2.0]
        assert toy.slam.loop_exclusion == 10
        # untouched keys keep their defaults
        assert toy.registration.acceptance_radius == 0.6

    def test_derived_radii(self):
        s = ScanloopSettings()
        assert s.coarsest_cell == 2.4
        assert s.vote_radius == pytest.approx(4.8)
        assert s.centroid_radius == pytest.approx(1.2)
        assert s.aggregation_radius == pytest.approx(2.4)


class TestOverlay:
    def test_environment_beats_file(self, tmp_path, monkeypatch):
        path = tmp_path / "run.yaml"
        path.write_text("slam:\n  loop_exclusion: 40\n  keyframe_distance: 3.0\n")
        monkeypatch.setenv("SCANLOOP_SLAM__LOOP_EXCLUSION", "25")
        s = load_settings(path)
        assert s.slam.loop_exclusion == 25
        assert s.slam.keyframe_distance == 3.0

    def test_data_root_variable(self, tmp_path, monkeypatch):
        assert ScanloopSettings().resolved_data_root == Path("./data")
        monkeypatch.setenv("SCANLOOP_DATA_ROOT", str(tmp_path))
        assert ScanloopSettings().resolved_data_root == tmp_path

    def test_file_is_not_sticky(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("log_level: DEBUG\n")
        assert load_settings(path).log_level == "DEBUG"
        assert load_settings().log_level == "INFO"

    def test_get_settings_is_cached(self):
        assert get_settings() is get_settings()


class TestValidation:
    def test_negative_threshold(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("registration:\n  rte_threshold: -1.0\n")
        with pytest.raises(ValidationError):
            load_settings(path)

    def test_levels_must_line_up(self):
        with pytest.raises(ValidationError):
            ScanloopSettings(backbone={"cells": [0.5, 1.0], "widths": [8]})

    def test_heavy_config_warns(self):
        with pytest.warns(UserWarning):
            load_settings(retrieval={"descriptor_dim": 2048})


class TestLogging:
    @pytest.fixture
    def package_logger(self):
        logger = logging.getLogger("scanloop")
        handlers, level = list(logger.handlers), logger.level
        yield logger
        logger.handlers[:] = handlers
        logger.setLevel(level)

    def test_setup_is_idempotent(self, package_logger):
        setup_logging("DEBUG")
        setup_logging("DEBUG")
        formatters = [h.formatter for h in package_logger.handlers]
        assert sum(isinstance(f, JSONFormatter) for f in formatters) == 1
        assert package_logger.level == logging.DEBUG

    def test_module_logger_record_is_json(self):
        logger = logging.getLogger("scanloop.matching.assignment")
        fields = {"requested": 8, "available": 3}
        record = logger.makeRecord(
            logger.name, logging.INFO, __file__, 1, "short top-k", None, None,
            extra={"fields": fields},
        )
        entry = json.loads(JSONFormatter().format(record))
        assert entry["logger"] == "scanloop.matching.assignment"
        assert entry["level"] == "INFO"
        assert entry["fields"] == fields
