"""Pretrained backbones with replaced heads and transfer/fine-tune freezing."""

import hashlib
import logging
from pathlib import Path
from typing import Any, Optional, Union
from urllib.parse import urlparse

import torch
import torch.nn.functional as F
from torch import nn
from torchvision import models

from catreid.config import settings
from catreid.core.exceptions import ConfigValidationError, WeightsCacheMissError, WeightsDownloadError
from catreid.schemas.model import BackboneName, BackboneSpec, ParamReport, TrainMode

logger = logging.getLogger(__name__)


def _strip_head(name: BackboneName, model: nn.Module) -> nn.Module:
    """Replace the final linear layer with identity so the model emits features."""
    if name == BackboneName.RESNET50:
        model.fc = nn.Identity()
    elif name == BackboneName.DENSENET121:
        model.classifier = nn.Identity()
    elif name == BackboneName.EFFICIENTNET_B4:
        model.classifier[1] = nn.Identity()
    elif name == BackboneName.CONVNEXT_TINY:
        model.classifier[2] = nn.Identity()
    return model


def _cached_weights_file(weights: Any) -> Path:
    filename = Path(urlparse(weights.url).path).name
    return Path(torch.hub.get_dir()) / "checkpoints" / filename


def build_backbone(spec: BackboneSpec) -> nn.Module:
    """
    Instantiate a torchvision backbone without its classification layer.

    Raises:
        ConfigValidationError: Unknown backbone name.
        WeightsCacheMissError: Offline mode and weights not cached.
        WeightsDownloadError: Weights download failed.
    """
    try:
        name = BackboneName(spec.name)
    except ValueError:
        raise ConfigValidationError(f"unknown backbone: {spec.name}")

    weights = models.get_model_weights(name.value).DEFAULT if spec.pretrained else None
    if weights is not None and settings.WEIGHTS_OFFLINE and not _cached_weights_file(weights).is_file():
        raise WeightsCacheMissError(
            f"{name.value} weights not in cache ({_cached_weights_file(weights)}) and offline mode is on"
        )

    try:
        model = models.get_model(name.value, weights=weights)
    except OSError as e:
        logger.error(f"Weight download for {name.value} failed: {e}")
        raise WeightsDownloadError(f"could not download {name.value} weights: {e}")
    return _strip_head(name, model)


def _freeze(module: nn.Module) -> None:
    for param in module.parameters():
        param.requires_grad_(False)


class ReidClassifier(nn.Module):
    """Backbone features followed by a fresh linear classification head."""

    def __init__(
        self,
        backbone: nn.Module,
        feature_dim: int,
        num_classes: int,
        mode: TrainMode = TrainMode.TRANSFER,
        freeze_norm_stats: bool = True,
    ):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, num_classes)
        self.mode = TrainMode(mode)
        self.freeze_norm_stats = freeze_norm_stats
        if self.mode == TrainMode.TRANSFER:
            _freeze(self.backbone)

    @property
    def backbone_frozen(self) -> bool:
        return self.mode == TrainMode.TRANSFER

    def train(self, mode: bool = True) -> "ReidClassifier":
        super().train(mode)
        if mode and self.backbone_frozen and self.freeze_norm_stats:
            self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


class ReidEmbedder(nn.Module):
    """Backbone features projected linearly to an embedding."""

    def __init__(
        self,
        backbone: nn.Module,
        feature_dim: int,
        embed_dim: int = 512,
        finetune: bool = False,
        l2_normalize: bool = False,
        freeze_norm_stats: bool = True,
    ):
        super().__init__()
        self.backbone = backbone
        self.projection = nn.Linear(feature_dim, embed_dim)
        self.embed_dim = embed_dim
        self.finetune = finetune
        self.l2_normalize = l2_normalize
        self.freeze_norm_stats = freeze_norm_stats
        if not finetune:
            _freeze(self.backbone)

    @property
    def backbone_frozen(self) -> bool:
        return not self.finetune

    def train(self, mode: bool = True) -> "ReidEmbedder":
        super().train(mode)
        if mode and self.backbone_frozen and self.freeze_norm_stats:
            self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.projection(self.backbone(x))
        if self.l2_normalize:
            out = F.normalize(out, dim=1)
        return out


def build_classifier(
    spec: BackboneSpec,
    num_classes: int,
    mode: TrainMode = TrainMode.TRANSFER,
    freeze_norm_stats: bool = True,
) -> ReidClassifier:
    """
    Build a classifier mapping (B, 3, 224, 224) to (B, num_classes) logits.

    In transfer mode only the head is trainable; in fine-tune mode everything is.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    model = ReidClassifier(
        build_backbone(spec), spec.feature_dim, num_classes, mode, freeze_norm_stats
    )
    logger.info(f"Built {spec.name.value} classifier ({mode.value}, {num_classes} classes)")
    return model


def build_embedder(
    spec: BackboneSpec,
    embed_dim: int = 512,
    finetune: bool = False,
    l2_normalize: bool = False,
    freeze_norm_stats: bool = True,
) -> ReidEmbedder:
    """Build an embedder; the backbone is frozen unless `finetune` is set."""
    if embed_dim < 2:
        raise ValueError("embed_dim must be >= 2")
    model = ReidEmbedder(
        build_backbone(spec), spec.feature_dim, embed_dim, finetune, l2_normalize, freeze_norm_stats
    )
    logger.info(
        f"Built {spec.name.value} embedder (dim {embed_dim}, "
        f"{'fine-tune' if finetune else 'frozen backbone'})"
    )
    return model


def trainable_report(model: nn.Module) -> ParamReport:
    """Count total, trainable and frozen parameters."""
    total = trainable = 0
    for param in model.parameters():
        total += param.numel()
        if param.requires_grad:
            trainable += param.numel()
    report = ParamReport(total_params=total, trainable_params=trainable, frozen_params=total - trainable)
    logger.info(
        f"Parameters: {report.total_params} total, {report.trainable_params} trainable, "
        f"{report.frozen_params} frozen"
    )
    return report


def freeze_fingerprint(model: nn.Module) -> str:
    """Hash of every frozen parameter's bytes, in name order."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters(), key=lambda item: item[0]):
        if not param.requires_grad:
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path: Path, model: nn.Module, meta: dict[str, Any]) -> Path:
    """Write weights plus the metadata needed to rebuild the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"meta": meta, "state_dict": model.state_dict()}, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(
    path: Path, map_location: Optional[Union[str, torch.device]] = "cpu"
) -> tuple[nn.Module, dict[str, Any]]:
    """Rebuild a classifier or embedder from a checkpoint written by save_checkpoint."""
    payload = torch.load(Path(path), map_location=map_location, weights_only=False)
    meta = payload["meta"]
    spec = BackboneSpec.model_validate({**meta["backbone"], "pretrained": False})
    if meta["kind"] == "embedder":
        model: nn.Module = build_embedder(
            spec,
            embed_dim=meta["embed_dim"],
            finetune=meta.get("finetune", False),
            l2_normalize=meta.get("l2_normalize", False),
        )
    else:
        model = build_classifier(spec, meta["num_classes"], TrainMode(meta["mode"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, meta
