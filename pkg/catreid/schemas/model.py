"""Backbone and training-mode schemas."""

from enum import Enum

from pydantic import BaseModel, Field, model_validator


class BackboneName(str, Enum):
    """Supported pretrained CNN backbones."""

    RESNET50 = "resnet50"
    DENSENET121 = "densenet121"
    EFFICIENTNET_B4 = "efficientnet_b4"
    CONVNEXT_TINY = "convnext_tiny"


# Penultimate width of each architecture.
FEATURE_DIMS: dict[BackboneName, int] = {
    BackboneName.RESNET50: 2048,
    BackboneName.DENSENET121: 1024,
    BackboneName.EFFICIENTNET_B4: 1792,
    BackboneName.CONVNEXT_TINY: 768,
}

DISPLAY_NAMES: dict[BackboneName, str] = {
    BackboneName.RESNET50: "ResNet50",
    BackboneName.DENSENET121: "DenseNet",
    BackboneName.EFFICIENTNET_B4: "EfficientNetB4",
    BackboneName.CONVNEXT_TINY: "ConvNeXt",
}


class TrainMode(str, Enum):
    """Which parameters a classifier updates."""

    TRANSFER = "transfer"
    FINETUNE = "finetune"


class BackboneSpec(BaseModel):
    """A backbone choice."""

    name: BackboneName = BackboneName.DENSENET121
    pretrained: bool = True
    feature_dim: int = Field(0, description="Filled from the architecture when omitted")

    @model_validator(mode="after")
    def _feature_dim_matches(self) -> "BackboneSpec":
        expected = FEATURE_DIMS[self.name]
        if self.feature_dim == 0:
            self.feature_dim = expected
        elif self.feature_dim != expected:
            raise ValueError(
                f"feature_dim {self.feature_dim} does not match {self.name.value} ({expected})"
            )
        return self

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.name]


class ParamReport(BaseModel):
    """Parameter counts of a model."""

    total_params: int
    trainable_params: int
    frozen_params: int
