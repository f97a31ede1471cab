"""Tests for suite file loading."""

import pytest

from catreid.core.exceptions import ConfigValidationError
from catreid.schemas.training import RunMode
from catreid.services.suite_service import load_suite, parse_suite, run_config

SUITE = """
paths: {data_root: data, work_dir: work}
runs:
  dense: {mode: transfer, backbone: {name: densenet121}}
  sia: {mode: siamese, lr0: 0.0005}
"""


def test_parse_suite(tmp_path):
    suite = parse_suite(SUITE, tmp_path)
    assert suite.paths.data_root == str(tmp_path / "data")
    assert run_config(suite, "sia").mode == RunMode.SIAMESE
    assert run_config(suite, "sia").lr0 == 0.0005


def test_unknown_run_lists_available(tmp_path):
    with pytest.raises(ConfigValidationError, match="dense, sia"):
        run_config(parse_suite(SUITE, tmp_path), "resnet")


@pytest.mark.parametrize(
    "text, match",
    [
        ("runs: [1, 2", "YAML"),
        ("- a\n- b\n", "mapping"),
        ("runs: {bad: {mode: siamese, loss: cross_entropy}}", "triplet"),
        ("dataset: {min_images: 4}", "min_images"),
    ],
)
def test_invalid_suites(tmp_path, text, match):
    with pytest.raises(ConfigValidationError, match=match):
        parse_suite(text, tmp_path)


def test_missing_suite_file(tmp_path):
    with pytest.raises(ConfigValidationError, match="not found"):
        load_suite(tmp_path / "suite.yaml")
