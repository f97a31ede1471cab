"""Training loops for classifier and siamese runs."""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from catreid.config import settings
from catreid.core.exceptions import (
    FreezeViolationError,
    NonFiniteLossError,
    NoTripletsError,
    StageOrderError,
)
from catreid.core.seeding import config_hash, derive_seed, rng_for, seed_everything, torch_generator
from catreid.schemas.dataset import DatasetManifest, Split, Stage
from catreid.schemas.metric import EmbeddingGallery
from catreid.schemas.model import TrainMode
from catreid.schemas.training import (
    METRICS_COLUMNS,
    EpochMetrics,
    MiningMode,
    MonitoredMetric,
    RunConfig,
    RunMode,
)
from catreid.services.augment_service import build_eval_pipeline, build_train_pipeline
from catreid.services.data import ManifestImageDataset, seed_worker
from catreid.services.dataset_service import manifest_data_hash
from catreid.services.metric_learning import (
    BalancedBatchSampler,
    build_gallery,
    classify_many,
    embed_records,
    sample_triplets,
    save_gallery,
    triplet_loss,
)
from catreid.services.model_zoo import (
    build_classifier,
    build_embedder,
    freeze_fingerprint,
    save_checkpoint,
    trainable_report,
)
from catreid.services.scheduling import SchedulerState, early_stop_check, scheduler_step

logger = logging.getLogger(__name__)


def resolve_device(name: Optional[str] = None) -> torch.device:
    """Map "auto" to the best available accelerator."""
    name = name or settings.DEVICE
    if name != "auto":
        return torch.device(name)
    if torch.cuda.is_available():
        return torch.device("cuda")
    if getattr(torch.backends, "mps", None) is not None and torch.backends.mps.is_available():
        return torch.device("mps")
    return torch.device("cpu")


class MetricsLog:
    """metrics.csv writer; one row per completed epoch."""

    def __init__(self, path: Path):
        self.path = Path(path)
        with self.path.open("w", newline="") as f:
            csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, metrics: EpochMetrics) -> None:
        row = metrics.model_dump()
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([row[c] for c in METRICS_COLUMNS])


def read_metrics(path: Path) -> list[EpochMetrics]:
    with Path(path).open(newline="") as f:
        return [EpochMetrics.model_validate(row) for row in csv.DictReader(f)]


def _require_split(manifest: DatasetManifest) -> None:
    if not manifest.has_stage(Stage.SPLIT):
        raise StageOrderError("manifest has not been split; run `catreid split` first")


def _write_run_files(
    run_dir: Path,
    cfg: RunConfig,
    manifest: DatasetManifest,
    manifest_path: Optional[Path],
    out_size: int,
) -> dict[str, Any]:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(
        yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
    )
    info = {
        "name": run_dir.name,
        "display_name": cfg.display_name,
        "model_name": cfg.display_name,
        "mode": cfg.mode.value,
        "backbone": cfg.backbone.name.value,
        "lr0": cfg.lr0,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "manifest": str(manifest_path) if manifest_path else None,
        "data_hash": manifest_data_hash(manifest),
        "num_classes": manifest.num_classes,
        "out_size": out_size,
    }
    _dump_run_info(run_dir, info)
    return info


def _dump_run_info(run_dir: Path, info: dict[str, Any]) -> None:
    (run_dir / "run.json").write_text(json.dumps(info, indent=2))


def _check_finite(loss: torch.Tensor, epoch: int, batch_idx: int) -> None:
    if not torch.isfinite(loss):
        logger.error(f"Non-finite loss {loss.item()} at epoch {epoch}, batch {batch_idx}")
        raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {batch_idx}")


def _check_frozen(model: nn.Module, fingerprint: Optional[str], epoch: int) -> None:
    if fingerprint is None:
        return
    if freeze_fingerprint(model) != fingerprint:
        logger.error(f"Frozen parameters changed by epoch {epoch}")
        raise FreezeViolationError(f"frozen backbone parameters changed by epoch {epoch}")


def _optimizer(model: nn.Module, cfg: RunConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr0, weight_decay=cfg.weight_decay)


def _monitored(cfg: RunConfig, metrics: EpochMetrics) -> float:
    if cfg.scheduler.plateau.monitored == MonitoredMetric.VAL_ACC:
        return metrics.val_acc
    return metrics.val_loss


def _summarize(run_dir: Path, info: dict[str, Any], history: list[EpochMetrics], stopped_early: bool) -> None:
    best = max(history, key=lambda m: m.val_acc)
    gap = max(m.train_acc - m.val_acc for m in history)
    info.update(
        {
            "epochs_completed": len(history),
            "best_epoch": best.epoch,
            "best_val_acc": best.val_acc,
            "stopped_early": stopped_early,
        }
    )
    _dump_run_info(run_dir, info)
    logger.info(
        f"Run {info['name']} finished after {len(history)} epochs: best val acc "
        f"{best.val_acc:.4f} at epoch {best.epoch}, max train/val gap {gap:.4f}"
    )


def _loader_kwargs() -> dict[str, Any]:
    workers = settings.NUM_WORKERS
    return {"num_workers": workers, "worker_init_fn": seed_worker if workers > 0 else None}


def _classifier_epoch(
    model: nn.Module,
    loader: DataLoader,
    optimizer: torch.optim.Optimizer,
    device: torch.device,
    epoch: int,
    grad_clip_norm: Optional[float],
) -> tuple[float, float]:
    model.train()
    running_loss = 0.0
    correct = 0
    total = 0
    for batch_idx, (images, labels) in enumerate(
        tqdm(loader, desc=f"epoch {epoch}", leave=False, disable=not settings.PROGRESS_BARS)
    ):
        images, labels = images.to(device), labels.to(device)
        optimizer.zero_grad()
        outputs = model(images)
        loss = F.cross_entropy(outputs, labels)
        _check_finite(loss, epoch, batch_idx)
        loss.backward()
        if grad_clip_norm:
            nn.utils.clip_grad_norm_(model.parameters(), max_norm=grad_clip_norm)
        optimizer.step()

        running_loss += loss.item() * labels.size(0)
        correct += outputs.argmax(dim=1).eq(labels).sum().item()
        total += labels.size(0)
    return running_loss / total, correct / total


@torch.no_grad()
def _classifier_validate(model: nn.Module, loader: DataLoader, device: torch.device) -> tuple[float, float]:
    model.eval()
    running_loss = 0.0
    correct = 0
    total = 0
    for images, labels in loader:
        images, labels = images.to(device), labels.to(device)
        outputs = model(images)
        running_loss += F.cross_entropy(outputs, labels, reduction="sum").item()
        correct += outputs.argmax(dim=1).eq(labels).sum().item()
        total += labels.size(0)
    if total == 0:
        return 0.0, 0.0
    return running_loss / total, correct / total


def train_classifier(
    cfg: RunConfig,
    manifest: DatasetManifest,
    run_dir: Union[str, Path],
    manifest_path: Optional[Path] = None,
    out_size: int = 224,
    device: Optional[torch.device] = None,
) -> Path:
    """
    Train a transfer or fine-tune classifier with AdamW and cross-entropy.

    Writes config.yaml, run.json, metrics.csv, ckpt_last.pt and ckpt_best.pt
    (highest val accuracy) under `run_dir`. Stops at epochs_max or when val
    accuracy stalls for the early-stop patience.

    Raises:
        StageOrderError: If the manifest is not split.
        NonFiniteLossError: On a NaN or infinite batch loss.
        FreezeViolationError: If a frozen parameter changes in transfer mode.
    """
    if cfg.mode == RunMode.SIAMESE:
        raise ValueError("train_classifier needs mode transfer or finetune")
    _require_split(manifest)
    run_dir = Path(run_dir)
    device = device or resolve_device()
    seed_everything(cfg.seed, settings.DETERMINISTIC)
    info = _write_run_files(run_dir, cfg, manifest, manifest_path, out_size)
    logger.info(f"Training {cfg.display_name} ({cfg.mode.value}) seed {cfg.seed} config {info['config_hash']} on {device}")

    train_ds = ManifestImageDataset.for_split(
        manifest, Split.TRAIN, build_train_pipeline(cfg.augment, derive_seed(cfg.seed, "augment")), out_size
    )
    val_ds = ManifestImageDataset.for_split(manifest, Split.VAL, build_eval_pipeline(cfg.augment), out_size)
    train_loader = DataLoader(
        train_ds,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch_generator(cfg.seed, "shuffle"),
        **_loader_kwargs(),
    )
    val_loader = DataLoader(val_ds, batch_size=cfg.batch_size, shuffle=False)

    model = build_classifier(
        cfg.backbone, manifest.num_classes, TrainMode(cfg.mode.value), cfg.freeze_norm_stats
    ).to(device)
    trainable_report(model)
    fingerprint = freeze_fingerprint(model) if model.backbone_frozen else None
    optimizer = _optimizer(model, cfg)
    schedule = SchedulerState.start(cfg.scheduler, cfg.lr0, optimizer)

    meta = {
        "kind": "classifier",
        "backbone": cfg.backbone.model_dump(mode="json"),
        "num_classes": manifest.num_classes,
        "mode": cfg.mode.value,
        "class_index": manifest.class_index,
        "config_hash": info["config_hash"],
        "out_size": out_size,
        "normalize": [list(v) for v in cfg.augment.normalize],
    }
    metrics_log = MetricsLog(run_dir / "metrics.csv")
    history: list[EpochMetrics] = []
    best_acc = -1.0
    stopped_early = False

    for epoch in range(1, cfg.epochs_max + 1):
        lr = schedule.lr
        train_loss, train_acc = _classifier_epoch(
            model, train_loader, optimizer, device, epoch, cfg.grad_clip_norm
        )
        val_loss, val_acc = _classifier_validate(model, val_loader, device)
        metrics = EpochMetrics(
            epoch=epoch, lr=lr, train_loss=train_loss, train_acc=train_acc, val_loss=val_loss, val_acc=val_acc
        )
        history.append(metrics)
        metrics_log.append(metrics)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs_max} lr {lr:g} train loss {train_loss:.4f} acc {train_acc:.4f} "
            f"| val loss {val_loss:.4f} acc {val_acc:.4f}"
        )

        epoch_meta = {**meta, "epoch": epoch, "val_acc": val_acc}
        save_checkpoint(run_dir / "ckpt_last.pt", model, epoch_meta)
        if val_acc > best_acc:
            best_acc = val_acc
            save_checkpoint(run_dir / "ckpt_best.pt", model, epoch_meta)
        if epoch == 1:
            _check_frozen(model, fingerprint, epoch)

        scheduler_step(schedule, _monitored(cfg, metrics))
        if early_stop_check(
            history, cfg.early_stop.patience_epochs, cfg.early_stop.min_delta, cfg.early_stop.metric
        ):
            logger.info(f"Early stopping after epoch {epoch}")
            stopped_early = True
            break

    _check_frozen(model, fingerprint, len(history))
    _summarize(run_dir, info, history, stopped_early)
    return run_dir


def _siamese_epoch(
    model: nn.Module,
    loader: DataLoader,
    optimizer: torch.optim.Optimizer,
    cfg: RunConfig,
    device: torch.device,
    epoch: int,
) -> tuple[float, float]:
    model.train()
    rng = rng_for(cfg.seed, f"triplets/{epoch}")
    running_loss = 0.0
    satisfied = 0
    n_triplets = 0
    steps = 0
    for batch_idx, (images, labels) in enumerate(
        tqdm(loader, desc=f"epoch {epoch}", leave=False, disable=not settings.PROGRESS_BARS)
    ):
        images = images.to(device)
        embeddings = model(images)
        triplets = sample_triplets(labels.tolist(), rng, cfg.mining, embeddings, cfg.margin)
        if not triplets:
            continue
        idx = torch.tensor(triplets, device=device)
        a, p, n = embeddings[idx[:, 0]], embeddings[idx[:, 1]], embeddings[idx[:, 2]]
        optimizer.zero_grad()
        loss = triplet_loss(a, p, n, cfg.margin, cfg.triplet_variant)
        _check_finite(loss, epoch, batch_idx)
        loss.backward()
        if cfg.grad_clip_norm:
            nn.utils.clip_grad_norm_(model.parameters(), max_norm=cfg.grad_clip_norm)
        optimizer.step()

        with torch.no_grad():
            d_ap = (a - p).pow(2).sum(dim=1)
            d_an = (a - n).pow(2).sum(dim=1)
            satisfied += int((d_ap < d_an).sum().item())
        running_loss += loss.item() * len(triplets)
        n_triplets += len(triplets)
        steps += 1

    if steps == 0:
        logger.error(f"Epoch {epoch} had no batch with a valid triplet")
        raise NoTripletsError(
            f"epoch {epoch} produced no valid triplets; each batch needs >= 2 classes "
            f"and >= 2 images of some class"
        )
    return running_loss / n_triplets, satisfied / n_triplets


def _siamese_validate(
    model: nn.Module,
    gallery: EmbeddingGallery,
    manifest: DatasetManifest,
    cfg: RunConfig,
    transform,
    device: torch.device,
    out_size: int,
) -> tuple[float, float]:
    records = manifest.records_in(Split.VAL)
    if not records:
        return 0.0, 0.0
    embeddings = embed_records(model, records, transform, device, cfg.batch_size, out_size)
    labels, _ = classify_many(embeddings, gallery, cfg.knn_k)
    correct = sum(gallery.class_ids[int(label)] == r.class_id for label, r in zip(labels, records))
    val_acc = correct / len(records)

    val_labels = [manifest.class_index[r.class_id] for r in records]
    tensor = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
    triplets = sample_triplets(val_labels, rng_for(cfg.seed, "val-triplets"), MiningMode.RANDOM)
    if not triplets:
        return 0.0, val_acc
    idx = torch.tensor(triplets)
    with torch.no_grad():
        val_loss = triplet_loss(
            tensor[idx[:, 0]], tensor[idx[:, 1]], tensor[idx[:, 2]], cfg.margin, cfg.triplet_variant
        ).item()
    return val_loss, val_acc


def train_siamese(
    cfg: RunConfig,
    manifest: DatasetManifest,
    run_dir: Union[str, Path],
    manifest_path: Optional[Path] = None,
    out_size: int = 224,
    device: Optional[torch.device] = None,
) -> Path:
    """
    Train an embedder with triplet loss over P×K balanced batches.

    Validation accuracy is nearest-gallery accuracy on the val split, with the
    gallery rebuilt every epoch from the same seeded train support set. The
    best epoch's gallery is saved as gallery.bin next to ckpt_best.pt.

    Raises:
        StageOrderError: If the manifest is not split.
        NoTripletsError: If an epoch has no batch with a valid triplet.
        NonFiniteLossError: On a NaN or infinite batch loss.
    """
    if cfg.mode != RunMode.SIAMESE:
        raise ValueError("train_siamese needs mode siamese")
    _require_split(manifest)
    run_dir = Path(run_dir)
    device = device or resolve_device()
    seed_everything(cfg.seed, settings.DETERMINISTIC)
    info = _write_run_files(run_dir, cfg, manifest, manifest_path, out_size)
    logger.info(f"Training {cfg.display_name} seed {cfg.seed} config {info['config_hash']} on {device}")

    train_ds = ManifestImageDataset.for_split(
        manifest, Split.TRAIN, build_train_pipeline(cfg.augment, derive_seed(cfg.seed, "augment")), out_size
    )
    sampler = BalancedBatchSampler(train_ds.labels, cfg.classes_per_batch, cfg.samples_per_class, cfg.seed)
    train_loader = DataLoader(train_ds, batch_sampler=sampler, **_loader_kwargs())
    eval_tf = build_eval_pipeline(cfg.augment)

    model = build_embedder(
        cfg.backbone, cfg.embed_dim, cfg.siamese_finetune, cfg.l2_normalize, cfg.freeze_norm_stats
    ).to(device)
    trainable_report(model)
    fingerprint = freeze_fingerprint(model) if model.backbone_frozen else None
    optimizer = _optimizer(model, cfg)
    schedule = SchedulerState.start(cfg.scheduler, cfg.lr0, optimizer)

    meta = {
        "kind": "embedder",
        "backbone": cfg.backbone.model_dump(mode="json"),
        "embed_dim": cfg.embed_dim,
        "finetune": cfg.siamese_finetune,
        "l2_normalize": cfg.l2_normalize,
        "num_classes": manifest.num_classes,
        "mode": cfg.mode.value,
        "knn_k": cfg.knn_k,
        "class_index": manifest.class_index,
        "config_hash": info["config_hash"],
        "out_size": out_size,
        "normalize": [list(v) for v in cfg.augment.normalize],
    }
    metrics_log = MetricsLog(run_dir / "metrics.csv")
    history: list[EpochMetrics] = []
    best_acc = -1.0
    stopped_early = False

    for epoch in range(1, cfg.epochs_max + 1):
        lr = schedule.lr
        train_loss, train_acc = _siamese_epoch(model, train_loader, optimizer, cfg, device, epoch)
        gallery = build_gallery(
            model,
            manifest,
            eval_tf,
            cfg.support_per_class,
            cfg.seed,
            cfg.gallery_mode,
            device,
            cfg.batch_size,
            out_size,
        )
        val_loss, val_acc = _siamese_validate(model, gallery, manifest, cfg, eval_tf, device, out_size)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        metrics = EpochMetrics(
            epoch=epoch, lr=lr, train_loss=train_loss, train_acc=train_acc, val_loss=val_loss, val_acc=val_acc
        )
        history.append(metrics)
        metrics_log.append(metrics)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs_max} lr {lr:g} triplet loss {train_loss:.4f} "
            f"satisfied {train_acc:.4f} | val loss {val_loss:.4f} gallery acc {val_acc:.4f}"
        )

        epoch_meta = {**meta, "epoch": epoch, "val_acc": val_acc}
        save_checkpoint(run_dir / "ckpt_last.pt", model, epoch_meta)
        if val_acc > best_acc:
            best_acc = val_acc
            save_checkpoint(run_dir / "ckpt_best.pt", model, epoch_meta)
            save_gallery(gallery, run_dir / "gallery.bin")
        if epoch == 1:
            _check_frozen(model, fingerprint, epoch)

        scheduler_step(schedule, _monitored(cfg, metrics))
        if early_stop_check(
            history, cfg.early_stop.patience_epochs, cfg.early_stop.min_delta, cfg.early_stop.metric
        ):
            logger.info(f"Early stopping after epoch {epoch}")
            stopped_early = True
            break

    _check_frozen(model, fingerprint, len(history))
    _summarize(run_dir, info, history, stopped_early)
    return run_dir


def train_run(
    cfg: RunConfig,
    manifest: DatasetManifest,
    run_dir: Union[str, Path],
    manifest_path: Optional[Path] = None,
    out_size: int = 224,
    device: Optional[torch.device] = None,
) -> Path:
    """Dispatch to the siamese or classifier loop by mode."""
    if cfg.is_siamese:
        return train_siamese(cfg, manifest, run_dir, manifest_path, out_size, device)
    return train_classifier(cfg, manifest, run_dir, manifest_path, out_size, device)
