"""Detector output and crop geometry schemas."""

from pydantic import BaseModel, ConfigDict, Field, field_validator


class Detection(BaseModel):
    """One detector box in source pixels."""

    model_config = ConfigDict(frozen=True)

    bbox: tuple[float, float, float, float] = Field(..., description="(x, y, w, h)")
    confidence: float = Field(..., ge=0.0, le=1.0)
    class_label: str = "cat"

    @field_validator("bbox")
    @classmethod
    def _positive_extent(cls, value):
        if value[2] <= 0 or value[3] <= 0:
            raise ValueError("bbox width and height must be positive")
        return value


class CropSpec(BaseModel):
    """A square crop window, possibly extending past the image."""

    model_config = ConfigDict(frozen=True)

    source_dims: tuple[int, int] = Field(..., description="(W, H) of the source image")
    square_bbox: tuple[int, int, int, int] = Field(..., description="(x, y, s, s)")
    pad_color: tuple[int, int, int] = (0, 0, 0)

    @field_validator("square_bbox")
    @classmethod
    def _is_square(cls, value):
        if value[2] != value[3] or value[2] < 1:
            raise ValueError("square_bbox must have equal positive sides")
        return value

    @field_validator("pad_color")
    @classmethod
    def _black(cls, value):
        if tuple(value) != (0, 0, 0):
            raise ValueError("pad_color is fixed to black")
        return value

    @property
    def side(self) -> int:
        return self.square_bbox[2]

    @property
    def padding(self) -> tuple[int, int, int, int]:
        """Pixels of the square outside the image: (left, top, right, bottom)."""
        x, y, s, _ = self.square_bbox
        width, height = self.source_dims
        return (
            min(s, max(0, -x)),
            min(s, max(0, -y)),
            min(s, max(0, x + s - width)),
            min(s, max(0, y + s - height)),
        )

    @property
    def in_bounds_box(self) -> tuple[int, int, int, int] | None:
        """Intersection with the image as (x0, y0, x1, y1), or None if empty."""
        x, y, s, _ = self.square_bbox
        width, height = self.source_dims
        x0, y0 = max(0, x), max(0, y)
        x1, y1 = min(width, x + s), min(height, y + s)
        if x1 <= x0 or y1 <= y0:
            return None
        return x0, y0, x1, y1
