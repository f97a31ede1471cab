"""Dataset manifest Pydantic schemas."""

from collections import Counter
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

MANIFEST_SCHEMA = "catreid-manifest/1"

BBox = tuple[float, float, float, float]


class Split(str, Enum):
    """Split assignment of a record."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    EXCLUDED = "excluded"


class ExclusionReason(str, Enum):
    """Why a record was removed from all splits."""

    MULTI_SUBJECT = "multi_subject"
    NO_DETECTION = "no_detection"
    CLASS_TOO_SMALL = "class_too_small"
    UNREADABLE = "unreadable"


class Stage(str, Enum):
    """Pipeline stages a manifest has been through."""

    INGESTED = "ingested"
    FILTERED = "filtered"
    PREPROCESSED = "preprocessed"
    SPLIT = "split"


class ImageRecord(BaseModel):
    """One source image."""

    model_config = ConfigDict(frozen=True)

    path: str = Field(..., description="Source image path")
    class_id: str = Field(..., min_length=1, description="Individual identifier")
    split: Split = Split.TRAIN
    exclusion_reason: Optional[ExclusionReason] = None
    bbox: Optional[BBox] = Field(None, description="Detector box (x, y, w, h), pre-clamp")
    clamped_bbox: Optional[BBox] = Field(None, description="Box clamped to image bounds")
    source_size: Optional[tuple[int, int]] = Field(None, description="(W, H) of the source")
    crop_path: Optional[str] = None
    crop_sha256: Optional[str] = None

    @model_validator(mode="after")
    def _excluded_iff_reason(self) -> "ImageRecord":
        if (self.split == Split.EXCLUDED) != (self.exclusion_reason is not None):
            raise ValueError("split == excluded iff exclusion_reason is set")
        return self

    @property
    def is_excluded(self) -> bool:
        return self.split == Split.EXCLUDED

    def excluded(self, reason: ExclusionReason) -> "ImageRecord":
        """Copy of this record excluded for `reason`."""
        return self.model_copy(update={"split": Split.EXCLUDED, "exclusion_reason": reason})


class ErrorEntry(BaseModel):
    """A file that could not be ingested."""

    path: str
    reason: str


class SplitCounts(BaseModel):
    """Image counts of one class."""

    train: int = 0
    val: int = 0
    test: int = 0
    excluded: int = 0


class DatasetManifest(BaseModel):
    """The labeled collection plus split bookkeeping."""

    model_config = ConfigDict(frozen=True)

    records: list[ImageRecord] = Field(default_factory=list)
    class_index: dict[str, int] = Field(default_factory=dict)
    seed: int = 0
    stages: list[Stage] = Field(default_factory=list)
    min_images: Optional[int] = None
    errors: list[ErrorEntry] = Field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    @property
    def stats(self) -> dict[str, SplitCounts]:
        """Per-class counts for every class in class_index."""
        counts: dict[str, Counter] = {cid: Counter() for cid in self.class_index}
        for record in self.records:
            if record.class_id in counts:
                counts[record.class_id][record.split.value] += 1
        return {cid: SplitCounts(**c) for cid, c in sorted(counts.items())}

    @property
    def exclusion_counts(self) -> dict[str, int]:
        """Excluded record count per reason."""
        counter = Counter(r.exclusion_reason.value for r in self.records if r.is_excluded)
        return dict(sorted(counter.items()))

    def has_stage(self, stage: Stage) -> bool:
        return stage in self.stages

    def with_stage(self, stage: Stage, **update) -> "DatasetManifest":
        stages = list(self.stages)
        if stage not in stages:
            stages.append(stage)
        return self.model_copy(update={"stages": stages, **update})

    def records_in(self, split: Split) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def label_of(self, record: ImageRecord) -> int:
        return self.class_index[record.class_id]
