"""Metric-learning schemas."""

from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from catreid.schemas.training import GalleryMode


class Triplet(NamedTuple):
    """Batch indices of one anchor/positive/negative triple."""

    anchor_idx: int
    positive_idx: int
    negative_idx: int


class EmbeddingGallery(BaseModel):
    """Support-set embeddings queried at identification time.

    In mean mode there is exactly one row per class and ``row_labels`` is
    ``0..C-1``; in per-image mode every support image is a row.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    class_ids: list[str]
    embeddings: np.ndarray = Field(..., description="Row-major float32 matrix")
    row_labels: list[int]
    embed_dim: int
    support_size: int
    seed: int = 0
    mode: GalleryMode = GalleryMode.MEAN

    @field_validator("embeddings")
    @classmethod
    def _matrix(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float32)
        if value.ndim != 2:
            raise ValueError("embeddings must be a 2-D matrix")
        if not np.isfinite(value).all():
            raise ValueError("gallery rows must be finite")
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "EmbeddingGallery":
        rows, dim = self.embeddings.shape
        if dim != self.embed_dim:
            raise ValueError(f"embed_dim {self.embed_dim} != matrix width {dim}")
        if len(self.row_labels) != rows:
            raise ValueError("row_labels must label every row")
        if any(not 0 <= label < len(self.class_ids) for label in self.row_labels):
            raise ValueError("row label out of range")
        if self.mode == GalleryMode.MEAN and list(self.row_labels) != list(range(len(self.class_ids))):
            raise ValueError("mean gallery needs exactly one row per class, in class order")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


class Prediction(BaseModel):
    """One per-image prediction."""

    path: str
    true_class: str
    predicted_class: str
    score: float = Field(..., description="Softmax confidence or Euclidean distance")

    @property
    def correct(self) -> bool:
        return self.true_class == self.predicted_class
