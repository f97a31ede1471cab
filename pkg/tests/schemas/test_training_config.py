"""Tests for run, backbone and augmentation configuration schemas."""

import math

import pytest
from pydantic import ValidationError

from catreid.schemas.augment import AugmentConfig
from catreid.schemas.model import BackboneSpec
from catreid.schemas.preprocess import CropSpec, Detection
from catreid.schemas.suite import SuiteConfig
from catreid.schemas.training import (
    EpochMetrics,
    LossKind,
    PlateauSpec,
    RunConfig,
    SchedulerKind,
    StepSpec,
)


def test_classifier_defaults():
    cfg = RunConfig(mode="transfer")
    assert cfg.loss == LossKind.CROSS_ENTROPY
    assert cfg.lr0 == 0.01
    assert cfg.scheduler.kind == SchedulerKind.PLATEAU_DECAY
    assert cfg.scheduler.plateau.patience == 5
    assert cfg.scheduler.plateau.factor == 0.5
    assert cfg.epochs_max == 50


def test_siamese_defaults():
    cfg = RunConfig(mode="siamese")
    assert cfg.loss == LossKind.TRIPLET
    assert cfg.lr0 == 0.005
    assert cfg.scheduler.kind == SchedulerKind.STEP_DECAY
    assert cfg.scheduler.step.interval_epochs == 10
    assert cfg.scheduler.step.factor == 0.5
    assert cfg.embed_dim == 512
    assert cfg.margin == 1.0
    assert (cfg.classes_per_batch, cfg.samples_per_class) == (8, 4)


def test_siamese_with_cross_entropy_is_rejected():
    with pytest.raises(ValidationError, match="triplet"):
        RunConfig(mode="siamese", loss="cross_entropy")


def test_classifier_with_triplet_is_rejected():
    with pytest.raises(ValidationError):
        RunConfig(mode="finetune", loss="triplet")


def test_negative_lr_is_rejected():
    with pytest.raises(ValidationError):
        RunConfig(mode="transfer", lr0=-0.1)


def test_display_names():
    assert RunConfig(mode="siamese", lr0=0.0005).display_name == "Siamese (0.0005)"
    assert RunConfig(mode="transfer", backbone={"name": "convnext_tiny"}).display_name == "ConvNeXt"


@pytest.mark.parametrize(
    "factory",
    [
        lambda: PlateauSpec(patience=0),
        lambda: PlateauSpec(factor=1.0),
        lambda: StepSpec(interval_epochs=0),
        lambda: StepSpec(factor=10.0),
    ],
)
def test_scheduler_ranges(factory):
    with pytest.raises(ValidationError):
        factory()


def test_backbone_feature_dim_is_filled_and_checked():
    assert BackboneSpec(name="efficientnet_b4").feature_dim == 1792
    with pytest.raises(ValidationError):
        BackboneSpec(name="resnet50", feature_dim=1024)
    with pytest.raises(ValidationError):
        BackboneSpec(name="vgg16")


def test_epoch_metrics_bounds():
    with pytest.raises(ValidationError):
        EpochMetrics(epoch=1, lr=0.01, train_loss=1.0, train_acc=1.2, val_loss=1.0, val_acc=0.5)
    with pytest.raises(ValidationError):
        EpochMetrics(epoch=1, lr=0.01, train_loss=math.nan, train_acc=0.2, val_loss=1.0, val_acc=0.5)


def test_augment_validation():
    with pytest.raises(ValidationError):
        AugmentConfig(blur_sigma_range=(2.0, 0.5))
    with pytest.raises(ValidationError):
        AugmentConfig(jitter=(0.2, 0.2, 0.2, 0.8))
    with pytest.raises(ValidationError):
        AugmentConfig(normalize=((0.5, 0.5, 0.5), (0.0, 1.0, 1.0)))


def test_detection_and_crop_spec_validation():
    with pytest.raises(ValidationError):
        Detection(bbox=(0, 0, 0, 10), confidence=0.9)
    with pytest.raises(ValidationError):
        Detection(bbox=(0, 0, 10, 10), confidence=1.5)
    with pytest.raises(ValidationError):
        CropSpec(source_dims=(100, 100), square_bbox=(0, 0, 10, 12))
    with pytest.raises(ValidationError):
        CropSpec(source_dims=(100, 100), square_bbox=(0, 0, 10, 10), pad_color=(255, 255, 255))


def test_crop_spec_padding():
    spec = CropSpec(source_dims=(100, 80), square_bbox=(-10, 50, 40, 40))
    assert spec.padding == (10, 0, 0, 10)
    assert spec.in_bounds_box == (0, 50, 30, 80)


def test_suite_requires_room_for_the_split():
    with pytest.raises(ValidationError):
        SuiteConfig(dataset={"min_images": 6, "val_per_class": 3, "test_per_class": 3})


def test_suite_resolves_relative_paths(tmp_path):
    suite = SuiteConfig(
        paths={"data_root": "data", "work_dir": "work"},
        preprocess={"detector": "stub:data/detections.json"},
    ).resolve(tmp_path)
    assert suite.paths.data_root == str(tmp_path / "data")
    assert suite.paths.manifest == str(tmp_path / "work" / "manifest.jsonl")
    assert suite.preprocess.detector == f"stub:{tmp_path / 'data' / 'detections.json'}"
