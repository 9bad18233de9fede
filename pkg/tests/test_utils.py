"""Unit tests for utility functions."""

import logging
import unittest
from pathlib import Path

import pytest

from traffic_forecaster.utils import configure_logging, ensure_output_dir, to_json, write_json


class TestUtils(unittest.TestCase):
    """Test utility functions."""

    def test_to_json_is_key_order_independent(self):
        a = {"rmse": 1.5, "mae": 0.5, "horizon_steps": 1}
        b = {"horizon_steps": 1, "mae": 0.5, "rmse": 1.5}
        self.assertEqual(to_json(a), to_json(b))
        self.assertTrue(to_json(a).endswith("}\n"))

    def test_configure_logging(self):
        configure_logging("debug")
        logger = logging.getLogger("traffic_forecaster")
        self.assertEqual(logger.level, logging.DEBUG)
        self.assertEqual(len(logger.handlers), 1)
        configure_logging("warning")
        self.assertEqual(logger.level, logging.WARNING)
        self.assertEqual(len(logger.handlers), 1)

    def test_unknown_log_level(self):
        with self.assertRaises(ValueError):
            configure_logging("chatty")


def test_ensure_output_dir_creates_nested_dirs(tmp_path):
    target = tmp_path / "a" / "b"
    assert ensure_output_dir(target) == target
    assert target.is_dir()


def test_ensure_output_dir_falls_back_when_path_is_a_file(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    assert ensure_output_dir(blocker) == Path.cwd()


def test_write_json(tmp_path):
    path = write_json({"b": [1, 2], "a": None}, tmp_path / "out.json")
    assert path.read_text() == '{\n  "a": null,\n  "b": [\n    1,\n    2\n  ]\n}\n'


@pytest.fixture(autouse=True)
def _restore_logging():
    yield
    configure_logging("INFO")
