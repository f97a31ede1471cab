"""Pytest configuration and fixtures."""

from pathlib import Path
from typing import Callable
from unittest.mock import patch

import pytest
from torch import nn

from catreid.schemas.dataset import DatasetManifest, ImageRecord, Stage
from catreid.schemas.model import BackboneSpec
from catreid.services.dataset_service import build_class_index
from catreid.services.synth import synthesize


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_progress():
    """Keep tqdm bars out of test output."""
    with patch("catreid.config.settings.PROGRESS_BARS", False):
        yield


@pytest.fixture
def make_manifest() -> Callable[..., DatasetManifest]:
    """
    Build an in-memory manifest from {class_id: image_count}.

    Paths are fake; use it for bookkeeping tests that never open files.
    """

    def _make(counts: dict[str, int], stages=(Stage.INGESTED,)) -> DatasetManifest:
        records = [
            ImageRecord(path=f"/data/{cid}/{i:03d}.jpg", class_id=cid)
            for cid, n in sorted(counts.items())
            for i in range(n)
        ]
        return DatasetManifest(
            records=records,
            class_index=build_class_index(records),
            stages=list(stages),
        )

    return _make


@pytest.fixture
def synth_root(tmp_path) -> Path:
    """Three small classes of ten synthetic images each."""
    root = tmp_path / "synth"
    synthesize(root, classes=3, per_class=10, seed=0, size=(64, 48))
    return root


class TinyBackbone(nn.Module):
    """Cheap stand-in for a torchvision trunk with the same output width."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(8),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(2),
            nn.Flatten(),
        )
        self.out = nn.Linear(32, feature_dim)

    def forward(self, x):
        return self.out(self.features(x))


@pytest.fixture
def tiny_backbone():
    """Patch build_backbone so classifiers and embedders train in milliseconds."""

    def _build(spec: BackboneSpec) -> nn.Module:
        return TinyBackbone(spec.feature_dim)

    with patch("catreid.services.model_zoo.build_backbone", side_effect=_build) as mock_build:
        yield mock_build

