"""Evaluation and comparison report schemas."""

from typing import Optional

from pydantic import BaseModel, Field

from catreid.schemas.training import RunMode


class RunResult(BaseModel):
    """Accuracies recorded for one run, in percent."""

    model_name: str
    mode: RunMode
    val_acc: Optional[float] = Field(None, ge=0.0, le=100.0)
    test_acc: Optional[float] = Field(None, ge=0.0, le=100.0)
    config_hash: str = ""
    data_hash: str = ""
    lr0: Optional[float] = None


class ReportRow(BaseModel):
    """One row of the comparison grid; None cells render as X."""

    model_name: str
    val_siamese: Optional[float] = None
    val_finetune: Optional[float] = None
    val_transfer: Optional[float] = None
    test_siamese: Optional[float] = None
    test_finetune: Optional[float] = None
    test_transfer: Optional[float] = None


class EvalReport(BaseModel):
    """Cross-model comparison grid plus the results it was built from."""

    rows: list[RunResult]
    grid: list[ReportRow]
