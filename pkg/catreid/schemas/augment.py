"""Augmentation configuration schema."""

from pydantic import BaseModel, Field, field_validator, model_validator

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class AugmentConfig(BaseModel):
    """Magnitudes and probabilities of the training augmentations."""

    hflip_p: float = Field(0.5, ge=0.0, le=1.0)
    rotation_deg: float = Field(15.0, ge=0.0)
    translate_frac: float = Field(0.1, ge=0.0, le=1.0)
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    blur_p: float = Field(0.3, ge=0.0, le=1.0)
    noise_sigma: float = Field(0.01, ge=0.0, description="Fraction of dynamic range")
    noise_p: float = Field(0.3, ge=0.0, le=1.0)
    jitter: tuple[float, float, float, float] = Field(
        (0.2, 0.2, 0.2, 0.05),
        description="(brightness, contrast, saturation, hue)",
    )
    cutout: tuple[int, float] = Field((1, 0.25), description="(count, max_side_frac)")
    perspective: tuple[float, float] = Field((0.3, 0.5), description="(distortion_scale, p)")
    normalize: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        IMAGENET_MEAN,
        IMAGENET_STD,
    )

    @field_validator("blur_sigma_range")
    @classmethod
    def _sigma_order(cls, value):
        if value[0] <= 0 or value[1] < value[0]:
            raise ValueError("blur_sigma_range must satisfy 0 < low <= high")
        return value

    @field_validator("jitter")
    @classmethod
    def _jitter_range(cls, value):
        if any(v < 0 for v in value) or value[3] > 0.5:
            raise ValueError("jitter magnitudes must be >= 0 and hue <= 0.5")
        return value

    @field_validator("cutout")
    @classmethod
    def _cutout_range(cls, value):
        count, frac = value
        if count < 0:
            raise ValueError("cutout count must be >= 0")
        if count > 0 and not 0.0 < frac <= 1.0:
            raise ValueError("cutout max_side_frac must be in (0, 1]")
        return value

    @field_validator("perspective")
    @classmethod
    def _perspective_range(cls, value):
        scale, p = value
        if not 0.0 <= scale <= 1.0 or not 0.0 <= p <= 1.0:
            raise ValueError("perspective distortion_scale and p must be in [0, 1]")
        return value

    @model_validator(mode="after")
    def _positive_std(self) -> "AugmentConfig":
        if any(s <= 0 for s in self.normalize[1]):
            raise ValueError("normalization std components must be > 0")
        return self

    @classmethod
    def disabled(cls, **normalize) -> "AugmentConfig":
        """Config with every stochastic transform switched off."""
        return cls(
            hflip_p=0.0,
            rotation_deg=0.0,
            translate_frac=0.0,
            blur_p=0.0,
            noise_p=0.0,
            noise_sigma=0.0,
            jitter=(0.0, 0.0, 0.0, 0.0),
            cutout=(0, 0.25),
            perspective=(0.0, 0.0),
            **normalize,
        )
