"""Run evaluation, per-image prediction dumps and the cross-model comparison grid."""

import csv
import io
import json
import logging
import re
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Union

import torch
from torch import nn

from catreid.core.exceptions import DatasetEmptyError, ManifestError, ReportError, StageOrderError
from catreid.schemas.augment import AugmentConfig
from catreid.schemas.dataset import DatasetManifest, ImageRecord, Split
from catreid.schemas.metric import Prediction
from catreid.schemas.model import DISPLAY_NAMES
from catreid.schemas.report import EvalReport, ReportRow, RunResult
from catreid.schemas.training import RunMode
from catreid.services.augment_service import build_eval_pipeline
from catreid.services.data import load_crop
from catreid.services.dataset_service import manifest_data_hash
from catreid.services.metric_learning import load_gallery, predict_siamese
from catreid.services.model_zoo import load_checkpoint
from catreid.services.trainer import resolve_device

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ["split", "path", "true_class", "predicted_class", "score"]

REPORT_COLUMNS = [
    "model",
    "val_siamese",
    "val_finetune",
    "val_transfer",
    "test_siamese",
    "test_finetune",
    "test_transfer",
]

REPORT_HEADINGS = [
    "Model",
    "Validation siamese",
    "Validation fine-tune",
    "Validation transfer",
    "Testing siamese",
    "Testing fine-tune",
    "Testing transfer",
]

MISSING = "X"

_SIAMESE_NAME = re.compile(r"^Siamese \((?P<lr>[0-9.eE+-]+)\)$")


@torch.no_grad()
def predict_classifier(
    model: nn.Module,
    records: list[ImageRecord],
    class_index: dict[str, int],
    transform: Callable,
    device: torch.device,
    batch_size: int = 32,
    out_size: int = 224,
) -> list[Prediction]:
    """Argmax-logit predictions with the softmax probability as score."""
    model.eval()
    class_ids = sorted(class_index, key=class_index.get)
    predictions: list[Prediction] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = torch.stack([transform(load_crop(r, out_size)) for r in chunk]).to(device)
        probs = torch.softmax(model(batch).float(), dim=1).cpu()
        scores, labels = probs.max(dim=1)
        for record, label, score in zip(chunk, labels.tolist(), scores.tolist()):
            predictions.append(
                Prediction(
                    path=record.path,
                    true_class=record.class_id,
                    predicted_class=class_ids[label],
                    score=score,
                )
            )
    return predictions


def _write_predictions(path: Path, split: Split, predictions: list[Prediction]) -> None:
    kept: list[dict] = []
    if path.is_file():
        with path.open(newline="") as f:
            kept = [row for row in csv.DictReader(f) if row["split"] != split.value]
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PREDICTION_COLUMNS)
        writer.writeheader()
        writer.writerows(kept)
        for p in predictions:
            writer.writerow({"split": split.value, **p.model_dump()})


def _update_eval_json(run_dir: Path, split: Split, accuracy: float, manifest: DatasetManifest) -> None:
    path = run_dir / "eval.json"
    info = json.loads((run_dir / "run.json").read_text()) if (run_dir / "run.json").is_file() else {}
    current = json.loads(path.read_text()) if path.is_file() else {}
    accuracies = current.get("accuracy", {})
    accuracies[split.value] = accuracy
    current.update(
        {
            "model_name": info.get("model_name", run_dir.name),
            "mode": info.get("mode"),
            "lr0": info.get("lr0"),
            "config_hash": info.get("config_hash", ""),
            "data_hash": manifest_data_hash(manifest),
            "accuracy": accuracies,
        }
    )
    path.write_text(json.dumps(current, indent=2))


def evaluate_run(
    run_dir: Union[str, Path],
    manifest: DatasetManifest,
    split: Split = Split.TEST,
    device: Optional[torch.device] = None,
    batch_size: int = 32,
) -> float:
    """
    Top-1 accuracy of a run's best checkpoint on one split.

    Classifier runs predict the argmax logit; siamese runs query the saved
    gallery. Per-image predictions go to predictions.csv and the accuracy is
    merged into eval.json.

    Raises:
        StageOrderError: No checkpoint (or gallery) in the run directory.
        DatasetEmptyError: The split has no records.
        ManifestError: Checkpoint and manifest disagree on the classes.
    """
    run_dir = Path(run_dir)
    split = Split(split)
    if split == Split.EXCLUDED:
        raise ValueError("cannot evaluate the excluded records")
    ckpt = run_dir / "ckpt_best.pt"
    if not ckpt.is_file():
        raise StageOrderError(f"no checkpoint in run dir {run_dir}")

    records = manifest.records_in(split)
    if not records:
        raise DatasetEmptyError(f"split '{split.value}' is empty")

    device = device or resolve_device()
    model, meta = load_checkpoint(ckpt, map_location=device)
    model.to(device)
    if meta["num_classes"] != manifest.num_classes or meta.get("class_index", manifest.class_index) != manifest.class_index:
        raise ManifestError(
            f"checkpoint was trained on {meta['num_classes']} classes, manifest has {manifest.num_classes}"
        )

    out_size = meta.get("out_size", 224)
    transform = build_eval_pipeline(AugmentConfig.disabled(normalize=meta["normalize"]))
    if meta["kind"] == "embedder":
        gallery_path = run_dir / "gallery.bin"
        if not gallery_path.is_file():
            raise StageOrderError(f"no gallery in run dir {run_dir}")
        predictions = predict_siamese(
            model, load_gallery(gallery_path), records, transform, meta.get("knn_k", 1), device, batch_size, out_size
        )
    else:
        predictions = predict_classifier(
            model, records, manifest.class_index, transform, device, batch_size, out_size
        )

    accuracy = sum(p.correct for p in predictions) / len(predictions)
    _write_predictions(run_dir / "predictions.csv", split, predictions)
    _update_eval_json(run_dir, split, accuracy, manifest)
    logger.info(f"{run_dir.name}: {split.value} accuracy {accuracy:.4f} over {len(predictions)} images")
    return accuracy


def recount_predictions(path: Union[str, Path], split: Optional[Split] = None) -> float:
    """Accuracy recomputed from a predictions.csv dump."""
    with Path(path).open(newline="") as f:
        rows = [r for r in csv.DictReader(f) if split is None or r["split"] == Split(split).value]
    if not rows:
        raise DatasetEmptyError(f"no predictions for split {split}")
    return sum(r["true_class"] == r["predicted_class"] for r in rows) / len(rows)


def collect_results(run_dirs: Sequence[Union[str, Path]], force: bool = False) -> list[RunResult]:
    """
    Read eval.json from each run as percentages.

    Raises:
        ReportError: A run was never evaluated, or runs were evaluated on
            different data and `force` is off.
    """
    results: list[RunResult] = []
    for run_dir in map(Path, run_dirs):
        path = run_dir / "eval.json"
        if not path.is_file():
            raise ReportError(f"run {run_dir} has not been evaluated")
        info = json.loads(path.read_text())
        accuracy = info.get("accuracy", {})
        results.append(
            RunResult(
                model_name=info["model_name"],
                mode=RunMode(info["mode"]),
                val_acc=accuracy["val"] * 100 if "val" in accuracy else None,
                test_acc=accuracy["test"] * 100 if "test" in accuracy else None,
                config_hash=info.get("config_hash", ""),
                data_hash=info.get("data_hash", ""),
                lr0=info.get("lr0"),
            )
        )

    hashes = {r.data_hash for r in results}
    if len(hashes) > 1:
        if not force:
            raise ReportError(f"runs were evaluated on different data ({', '.join(sorted(hashes))}); use --force")
        logger.warning(f"Combining runs with different data hashes: {sorted(hashes)}")
    return results


def _row_order(name: str, lr0: Optional[float]) -> tuple:
    backbones = list(DISPLAY_NAMES.values())
    if name in backbones:
        return (0, backbones.index(name), 0.0, name)
    if name.startswith("Siamese"):
        return (1, 0, -(lr0 or 0.0), name)
    return (2, 0, 0.0, name)


def build_report(results: Sequence[RunResult]) -> EvalReport:
    """
    Arrange run results into the comparison grid.

    Rows are the four backbones in fixed order, then siamese runs by
    descending learning rate, then anything else by name.

    Raises:
        ReportError: No results, or a (model, mode) pair appears twice.
    """
    if not results:
        raise ReportError("no runs to report")

    seen: set[tuple[str, RunMode]] = set()
    rows: dict[str, ReportRow] = {}
    lrs: dict[str, Optional[float]] = {}
    for result in results:
        key = (result.model_name, result.mode)
        if key in seen:
            raise ReportError(f"duplicate run for {result.model_name} ({result.mode.value})")
        seen.add(key)
        row = rows.setdefault(result.model_name, ReportRow(model_name=result.model_name))
        lrs.setdefault(result.model_name, result.lr0)
        setattr(row, f"val_{result.mode.value}", result.val_acc)
        setattr(row, f"test_{result.mode.value}", result.test_acc)

    grid = sorted(rows.values(), key=lambda r: _row_order(r.model_name, lrs[r.model_name]))
    return EvalReport(rows=list(results), grid=grid)


def format_cell(value: Optional[float]) -> str:
    return MISSING if value is None else f"{value:.1f}"


def _cells(row: ReportRow) -> list[str]:
    return [row.model_name] + [format_cell(getattr(row, column)) for column in REPORT_COLUMNS[1:]]


def report_markdown(report: EvalReport) -> str:
    lines = [
        "| " + " | ".join(REPORT_HEADINGS) + " |",
        "|" + "|".join(["---"] * len(REPORT_HEADINGS)) + "|",
    ]
    lines.extend("| " + " | ".join(_cells(row)) + " |" for row in report.grid)
    lines.append("")
    lines.append(f"{MISSING}: data does not exist")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(_cells(row) for row in report.grid)
    return buf.getvalue()


def _parse_cell(text: str) -> Optional[float]:
    text = text.strip()
    return None if text == MISSING else float(text)


def parse_report_csv(text: str) -> EvalReport:
    """Rebuild an EvalReport from the CSV written by report_csv."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != REPORT_COLUMNS:
        raise ReportError(f"unexpected report header: {header}")

    results: list[RunResult] = []
    for cells in reader:
        if not cells:
            continue
        name, values = cells[0], dict(zip(REPORT_COLUMNS[1:], map(_parse_cell, cells[1:])))
        match = _SIAMESE_NAME.match(name)
        lr0 = float(match.group("lr")) if match else None
        for mode in RunMode:
            val, test = values[f"val_{mode.value}"], values[f"test_{mode.value}"]
            if val is None and test is None:
                continue
            results.append(RunResult(model_name=name, mode=mode, val_acc=val, test_acc=test, lr0=lr0))
    return build_report(results)


class RenderedReport(NamedTuple):
    report: EvalReport
    markdown: str
    csv: str


def render_report(results: Sequence[RunResult], out_dir: Optional[Union[str, Path]] = None) -> RenderedReport:
    """Build the grid and its markdown/CSV forms; write report.md and report.csv when out_dir is set."""
    report = build_report(results)
    rendered = RenderedReport(report, report_markdown(report), report_csv(report))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.md").write_text(rendered.markdown)
        (out_dir / "report.csv").write_text(rendered.csv)
        logger.info(f"Wrote report with {len(report.grid)} rows to {out_dir}")
    return rendered


def render_run_report(
    run_dirs: Sequence[Union[str, Path]],
    out_dir: Optional[Union[str, Path]] = None,
    force: bool = False,
) -> RenderedReport:
    """collect_results followed by render_report."""
    return render_report(collect_results(run_dirs, force=force), out_dir)
