"""Run configuration and training metric schemas."""

import math
from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from catreid.schemas.augment import AugmentConfig
from catreid.schemas.model import BackboneSpec


class RunMode(str, Enum):
    """What a run trains."""

    TRANSFER = "transfer"
    FINETUNE = "finetune"
    SIAMESE = "siamese"


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    TRIPLET = "triplet"


class TripletVariant(str, Enum):
    """Hinged squared form, or the unhinged sum kept for comparison."""

    HINGED = "hinged"
    AS_PRINTED = "as-printed"


class MiningMode(str, Enum):
    RANDOM = "random"
    SEMIHARD = "semihard"


class GalleryMode(str, Enum):
    """Mean embedding per class, or every support image as its own row."""

    MEAN = "mean"
    PER_IMAGE = "per_image"


class SchedulerKind(str, Enum):
    PLATEAU_DECAY = "plateau_decay"
    STEP_DECAY = "step_decay"


class MonitoredMetric(str, Enum):
    VAL_LOSS = "val_loss"
    VAL_ACC = "val_acc"


class PlateauSpec(BaseModel):
    """Reduce-on-plateau parameters."""

    patience: int = Field(5, ge=1)
    factor: float = Field(0.5, gt=0.0, lt=1.0)
    monitored: MonitoredMetric = MonitoredMetric.VAL_LOSS
    min_delta: float = Field(0.0, ge=0.0)


class StepSpec(BaseModel):
    """Fixed-interval decay: multiply by `factor` every `interval_epochs`."""

    interval_epochs: int = Field(10, ge=1)
    factor: float = Field(0.5, gt=0.0, lt=1.0)


class SchedulerSpec(BaseModel):
    kind: SchedulerKind = SchedulerKind.PLATEAU_DECAY
    plateau: PlateauSpec = Field(default_factory=PlateauSpec)
    step: StepSpec = Field(default_factory=StepSpec)


class EarlyStopSpec(BaseModel):
    """Stop when the watched validation metric stalls."""

    metric: MonitoredMetric = MonitoredMetric.VAL_ACC
    patience_epochs: int = Field(10, ge=1)
    min_delta: float = Field(0.001, ge=0.0, description="In the metric's units (0.001 = 0.1 pp of accuracy)")


class RunConfig(BaseModel):
    """One experiment."""

    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    mode: RunMode = RunMode.TRANSFER
    lr0: float = Field(0.0, description="Initial learning rate; mode default when 0")
    weight_decay: float = Field(0.01, ge=0.0)
    scheduler: Optional[SchedulerSpec] = None
    loss: Optional[LossKind] = None
    epochs_max: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    early_stop: EarlyStopSpec = Field(default_factory=EarlyStopSpec)
    freeze_norm_stats: bool = True
    grad_clip_norm: Optional[float] = Field(None, gt=0.0)

    # Siamese branch
    embed_dim: int = Field(512, ge=2)
    margin: float = Field(1.0, ge=0.0)
    triplet_variant: TripletVariant = TripletVariant.HINGED
    mining: MiningMode = MiningMode.RANDOM
    classes_per_batch: int = Field(8, ge=2)
    samples_per_class: int = Field(4, ge=2)
    support_per_class: int = Field(3, ge=1)
    gallery_mode: GalleryMode = GalleryMode.MEAN
    knn_k: int = Field(1, ge=1)
    l2_normalize: bool = False
    siamese_finetune: bool = False

    @model_validator(mode="before")
    @classmethod
    def _mode_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        mode = data.get("mode", RunMode.TRANSFER)
        siamese = (mode.value if isinstance(mode, Enum) else str(mode)) == RunMode.SIAMESE.value
        data.setdefault("loss", LossKind.TRIPLET if siamese else LossKind.CROSS_ENTROPY)
        if not data.get("lr0"):
            data["lr0"] = 0.005 if siamese else 0.01
        if data.get("scheduler") is None:
            kind = SchedulerKind.STEP_DECAY if siamese else SchedulerKind.PLATEAU_DECAY
            data["scheduler"] = {"kind": kind}
        return data

    @field_validator("lr0")
    @classmethod
    def _positive_lr(cls, value: float) -> float:
        if not value > 0 or not math.isfinite(value):
            raise ValueError("lr0 must be > 0")
        return value

    @model_validator(mode="after")
    def _loss_matches_mode(self) -> "RunConfig":
        if self.mode == RunMode.SIAMESE and self.loss != LossKind.TRIPLET:
            raise ValueError("mode=siamese requires loss=triplet")
        if self.mode != RunMode.SIAMESE and self.loss != LossKind.CROSS_ENTROPY:
            raise ValueError(f"mode={self.mode.value} requires loss=cross_entropy")
        return self

    @property
    def is_siamese(self) -> bool:
        return self.mode == RunMode.SIAMESE

    @property
    def display_name(self) -> str:
        """Row label used in comparison reports."""
        if self.is_siamese:
            return f"Siamese ({self.lr0:g})"
        return self.backbone.display_name


class EpochMetrics(BaseModel):
    """One row of metrics.csv."""

    epoch: int = Field(..., ge=1)
    lr: float
    train_loss: float
    train_acc: float = Field(..., ge=0.0, le=1.0)
    val_loss: float
    val_acc: float = Field(..., ge=0.0, le=1.0)

    @field_validator("train_loss", "val_loss")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("losses must be finite")
        return value


METRICS_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]
