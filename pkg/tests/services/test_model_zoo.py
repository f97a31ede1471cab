"""Tests for backbone construction, freezing and checkpoints."""

import math
from unittest.mock import patch

import pytest
import torch
import torch.nn.functional as F

from catreid.core.exceptions import WeightsCacheMissError
from catreid.schemas.model import BackboneName, BackboneSpec, TrainMode
from catreid.services.model_zoo import (
    build_backbone,
    build_classifier,
    build_embedder,
    freeze_fingerprint,
    load_checkpoint,
    save_checkpoint,
    trainable_report,
)


def _steps(model, count=3, size=32, classes=4):
    optimizer = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.1)
    model.train()
    for step in range(count):
        gen = torch.Generator().manual_seed(step)
        x = torch.randn(4, 3, size, size, generator=gen)
        y = torch.randint(0, classes, (4,), generator=gen)
        optimizer.zero_grad()
        F.cross_entropy(model(x), y).backward()
        optimizer.step()


def test_transfer_freezes_backbone(tiny_backbone):
    model = build_classifier(BackboneSpec(name="resnet50"), 4, TrainMode.TRANSFER)
    report = trainable_report(model)
    assert report.trainable_params == 2048 * 4 + 4
    assert report.frozen_params == report.total_params - report.trainable_params

    before = freeze_fingerprint(model)
    head = model.head.weight.detach().clone()
    running = model.backbone.features[1].running_mean.clone()
    _steps(model)
    assert freeze_fingerprint(model) == before
    assert not torch.equal(model.head.weight, head)
    assert torch.equal(model.backbone.features[1].running_mean, running)


def test_finetune_trains_everything(tiny_backbone):
    model = build_classifier(BackboneSpec(), 4, TrainMode.FINETUNE)
    report = trainable_report(model)
    assert report.frozen_params == 0
    conv = model.backbone.features[0].weight.detach().clone()
    _steps(model)
    assert not torch.equal(model.backbone.features[0].weight, conv)


def test_classifier_output_shape(tiny_backbone):
    model = build_classifier(BackboneSpec(name="convnext_tiny"), 7)
    assert model(torch.randn(2, 3, 32, 32)).shape == (2, 7)
    with pytest.raises(ValueError):
        build_classifier(BackboneSpec(), 1)


def test_embedder_shapes_and_normalization(tiny_backbone):
    frozen = build_embedder(BackboneSpec(), embed_dim=16)
    assert frozen.backbone_frozen
    assert trainable_report(frozen).trainable_params == 1024 * 16 + 16

    normed = build_embedder(BackboneSpec(), embed_dim=16, finetune=True, l2_normalize=True)
    out = normed.eval()(torch.randn(3, 3, 32, 32))
    assert out.shape == (3, 16)
    assert torch.allclose(out.norm(dim=1), torch.ones(3), atol=1e-5)
    with pytest.raises(ValueError):
        build_embedder(BackboneSpec(), embed_dim=1)


def test_checkpoint_round_trip(tiny_backbone, tmp_path):
    spec = BackboneSpec(name="efficientnet_b4")
    model = build_classifier(spec, 3, TrainMode.FINETUNE)
    meta = {
        "kind": "classifier",
        "backbone": spec.model_dump(mode="json"),
        "num_classes": 3,
        "mode": "finetune",
    }
    path = save_checkpoint(tmp_path / "ckpt_best.pt", model, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    x = torch.randn(2, 3, 32, 32)
    model.eval()
    assert torch.allclose(loaded(x), model(x))
    assert not (tmp_path / "ckpt_best.pt.tmp").exists()


def test_offline_without_cache(tmp_path):
    with patch("catreid.services.model_zoo.settings.WEIGHTS_OFFLINE", True), patch(
        "catreid.services.model_zoo.torch.hub.get_dir", return_value=str(tmp_path)
    ):
        with pytest.raises(WeightsCacheMissError, match="offline"):
            build_backbone(BackboneSpec(name="resnet50"))


@pytest.mark.slow
@pytest.mark.parametrize("name", list(BackboneName))
def test_real_backbone_transfer_keeps_trunk(name):
    spec = BackboneSpec(name=name, pretrained=False)
    model = build_classifier(spec, 4, TrainMode.TRANSFER)
    assert trainable_report(model).trainable_params == spec.feature_dim * 4 + 4
    before = freeze_fingerprint(model)
    _steps(model, size=64)
    assert freeze_fingerprint(model) == before


@pytest.mark.slow
@pytest.mark.parametrize("name", list(BackboneName))
def test_real_backbone_finetune_moves_trunk(name):
    model = build_classifier(BackboneSpec(name=name, pretrained=False), 4, TrainMode.FINETUNE)
    assert trainable_report(model).frozen_params == 0
    before = {k: p.detach().clone() for k, p in model.backbone.named_parameters()}
    _steps(model, size=64)
    changed = [k for k, p in model.backbone.named_parameters() if not torch.equal(p, before[k])]
    assert changed


@pytest.mark.slow
def test_first_batch_loss_near_uniform():
    torch.manual_seed(0)
    model = build_classifier(BackboneSpec(pretrained=False), 466, TrainMode.FINETUNE)
    model.train()
    x = torch.randn(8, 3, 64, 64)
    y = torch.randint(0, 466, (8,))
    with torch.no_grad():
        loss = F.cross_entropy(model(x), y).item()
    assert abs(loss - math.log(466)) <= 0.5
