"""Experiment suite (CLI config file) schemas."""

from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, model_validator

from catreid.schemas.training import RunConfig


class PathsConfig(BaseModel):
    data_root: Optional[str] = None
    work_dir: str = "work"
    manifest: str = "manifest.jsonl"


class DatasetParams(BaseModel):
    min_images: int = Field(8, ge=6)
    val_per_class: int = Field(3, ge=1)
    test_per_class: int = Field(2, ge=1)
    seed: int = 0


class PreprocessParams(BaseModel):
    detector: Optional[str] = Field(None, description="stub:FILE, http(s)://URL or cmd:COMMAND")
    conf_threshold: float = Field(0.5, ge=0.0, le=1.0)
    out_size: int = Field(224, ge=8)
    out_dir: str = "crops"
    target_label: str = "cat"


class ReportParams(BaseModel):
    out_dir: str = "report"


class SuiteConfig(BaseModel):
    """One declarative file describing a whole experiment suite."""

    paths: PathsConfig = Field(default_factory=PathsConfig)
    dataset: DatasetParams = Field(default_factory=DatasetParams)
    preprocess: PreprocessParams = Field(default_factory=PreprocessParams)
    runs: dict[str, RunConfig] = Field(default_factory=dict)
    report: ReportParams = Field(default_factory=ReportParams)
    full_scale: bool = Field(False, description="Needs --full-scale to train")

    @model_validator(mode="after")
    def _split_fits(self) -> "SuiteConfig":
        need = self.dataset.val_per_class + self.dataset.test_per_class + 1
        if self.dataset.min_images < need:
            raise ValueError(f"min_images must be >= val + test + 1 ({need})")
        return self

    def resolve(self, base: Path) -> "SuiteConfig":
        """Copy with relative paths anchored at `base`."""

        def anchor(value: Optional[str]) -> Optional[str]:
            if value is None:
                return None
            path = Path(value)
            return str(path if path.is_absolute() else base / path)

        work_dir = anchor(self.paths.work_dir)
        paths = self.paths.model_copy(
            update={
                "data_root": anchor(self.paths.data_root),
                "work_dir": work_dir,
                "manifest": str(Path(work_dir) / self.paths.manifest)
                if not Path(self.paths.manifest).is_absolute()
                else self.paths.manifest,
            }
        )
        preprocess = self.preprocess
        if preprocess.detector and preprocess.detector.startswith("stub:"):
            preprocess = preprocess.model_copy(
                update={"detector": "stub:" + anchor(preprocess.detector[len("stub:"):])}
            )
        return self.model_copy(update={"paths": paths, "preprocess": preprocess})
