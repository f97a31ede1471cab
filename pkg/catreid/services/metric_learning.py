"""Triplet loss, triplet sampling, support galleries and nearest-neighbor identification."""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import Sampler

from catreid.core.exceptions import (
    ClassTooSmallError,
    EmptyGalleryError,
    GalleryParseError,
    InvalidEmbeddingError,
    SchemaVersionError,
)
from catreid.core.seeding import rng_for
from catreid.schemas.dataset import DatasetManifest, ImageRecord, Split
from catreid.schemas.metric import EmbeddingGallery, Prediction, Triplet
from catreid.schemas.training import GalleryMode, MiningMode, TripletVariant
from catreid.services.data import load_crop

logger = logging.getLogger(__name__)

GALLERY_SCHEMA = "catreid-gallery/1"


def triplet_loss(
    a: torch.Tensor,
    p: torch.Tensor,
    n: torch.Tensor,
    margin: float = 1.0,
    variant: TripletVariant = TripletVariant.HINGED,
) -> torch.Tensor:
    """
    Triplet loss on single vectors (N,) or batches (B, N).

    Hinged form: max(‖a−p‖² − ‖a−n‖² + margin, 0), averaged over the batch.
    ``as-printed``: ‖a−p‖ + ‖a−n‖ + margin with no hinge; it rewards pulling
    negatives closer and is kept only to document that divergence.

    Raises:
        InvalidEmbeddingError: On shape mismatch or non-finite input.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if a.shape != p.shape or a.shape != n.shape:
        raise InvalidEmbeddingError(
            f"dimension mismatch: {tuple(a.shape)}, {tuple(p.shape)}, {tuple(n.shape)}"
        )
    if a.dim() not in (1, 2):
        raise InvalidEmbeddingError("expected (N,) or (B, N) embeddings")
    if not (torch.isfinite(a).all() and torch.isfinite(p).all() and torch.isfinite(n).all()):
        raise InvalidEmbeddingError("non-finite embedding values")

    d_ap = (a - p).pow(2).sum(dim=-1)
    d_an = (a - n).pow(2).sum(dim=-1)
    if TripletVariant(variant) == TripletVariant.AS_PRINTED:
        losses = d_ap.sqrt() + d_an.sqrt() + margin
    else:
        losses = torch.clamp(d_ap - d_an + margin, min=0.0)
    return losses.mean()


def sample_triplets(
    batch_labels: Sequence,
    rng: np.random.Generator,
    mode: MiningMode = MiningMode.RANDOM,
    embeddings: Optional[torch.Tensor] = None,
    margin: float = 1.0,
) -> list[Triplet]:
    """
    One triplet per eligible anchor.

    Positives are drawn uniformly from the anchor's class (other indices),
    negatives uniformly from other classes. In semi-hard mode the negative is
    drawn from those with d_ap < d_an < d_ap + margin (squared distances)
    when any exist.
    """
    labels = list(batch_labels)
    by_class: dict = defaultdict(list)
    for idx, label in enumerate(labels):
        by_class[label].append(idx)

    if len(by_class) < 2 or all(len(v) < 2 for v in by_class.values()):
        logger.warning(
            f"No valid triplets in batch of {len(labels)} ({len(by_class)} classes); step skipped"
        )
        return []

    semihard = MiningMode(mode) == MiningMode.SEMIHARD
    if semihard:
        if embeddings is None:
            raise ValueError("semi-hard mining needs embeddings")
        emb = embeddings.detach()
        dist = torch.cdist(emb, emb).pow(2).cpu().numpy()

    triplets: list[Triplet] = []
    for anchor, label in enumerate(labels):
        same = [i for i in by_class[label] if i != anchor]
        if not same:
            continue
        others = [i for i, other in enumerate(labels) if other != label]
        positive = same[int(rng.integers(len(same)))]
        negatives = others
        if semihard:
            d_ap = dist[anchor, positive]
            band = [i for i in others if d_ap < dist[anchor, i] < d_ap + margin]
            if band:
                negatives = band
        negative = negatives[int(rng.integers(len(negatives)))]
        triplets.append(Triplet(anchor, positive, negative))
    return triplets


class BalancedBatchSampler(Sampler[list[int]]):
    """
    Batches of P classes × K samples.

    Classes with fewer than K images are sampled with replacement. The number
    of batches per epoch is ``len(labels) // (P * K)`` (at least one).
    """

    def __init__(self, labels: Sequence[int], classes_per_batch: int = 8, samples_per_class: int = 4, seed: int = 0):
        self.labels = list(labels)
        self.by_class: dict[int, list[int]] = defaultdict(list)
        for idx, label in enumerate(self.labels):
            self.by_class[label].append(idx)
        self.classes = sorted(self.by_class)
        self.classes_per_batch = min(classes_per_batch, len(self.classes))
        self.samples_per_class = samples_per_class
        self.seed = seed
        self._epoch = 0

    def __len__(self) -> int:
        return max(1, len(self.labels) // (self.classes_per_batch * self.samples_per_class))

    def __iter__(self) -> Iterator[list[int]]:
        rng = rng_for(self.seed, f"batches/{self._epoch}")
        self._epoch += 1
        for _ in range(len(self)):
            chosen = rng.choice(self.classes, size=self.classes_per_batch, replace=False)
            batch: list[int] = []
            for label in chosen:
                pool = self.by_class[int(label)]
                replace = len(pool) < self.samples_per_class
                batch.extend(int(i) for i in rng.choice(pool, size=self.samples_per_class, replace=replace))
            yield batch


@torch.no_grad()
def embed_records(
    embedder: nn.Module,
    records: list[ImageRecord],
    transform: Callable,
    device: torch.device,
    batch_size: int = 32,
    out_size: int = 224,
) -> np.ndarray:
    """Embed records in inference mode, in order."""
    embedder.eval()
    chunks: list[np.ndarray] = []
    for start in range(0, len(records), batch_size):
        batch = torch.stack(
            [transform(load_crop(r, out_size)) for r in records[start : start + batch_size]]
        ).to(device)
        chunks.append(embedder(batch).float().cpu().numpy())
    if not chunks:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def select_support(
    manifest: DatasetManifest, support_per_class: int = 3, seed: int = 0
) -> dict[str, list[ImageRecord]]:
    """
    Seeded sample of train records per class.

    Raises:
        ClassTooSmallError: If a class has fewer train images than requested.
    """
    train_by_class: dict[str, list[ImageRecord]] = defaultdict(list)
    for record in manifest.records:
        if record.split == Split.TRAIN:
            train_by_class[record.class_id].append(record)

    rng = rng_for(seed, "gallery")
    support: dict[str, list[ImageRecord]] = {}
    for class_id in sorted(manifest.class_index, key=manifest.class_index.get):
        pool = train_by_class.get(class_id, [])
        if len(pool) < support_per_class:
            raise ClassTooSmallError(class_id, len(pool), support_per_class)
        picks = rng.choice(len(pool), size=support_per_class, replace=False)
        support[class_id] = [pool[int(i)] for i in sorted(picks)]
    return support


def gallery_from_embeddings(
    class_ids: list[str],
    support_embeddings: list[np.ndarray],
    support_size: int,
    seed: int = 0,
    mode: GalleryMode = GalleryMode.MEAN,
) -> EmbeddingGallery:
    """Assemble a gallery from per-class support embeddings (one (k, N) array per class)."""
    if not class_ids:
        raise EmptyGalleryError("no classes to build a gallery from")
    if GalleryMode(mode) == GalleryMode.MEAN:
        rows = np.stack([e.astype(np.float64).mean(axis=0) for e in support_embeddings]).astype(np.float32)
        row_labels = list(range(len(class_ids)))
    else:
        rows = np.concatenate(support_embeddings, axis=0).astype(np.float32)
        row_labels = [label for label, e in enumerate(support_embeddings) for _ in range(len(e))]
    return EmbeddingGallery(
        class_ids=list(class_ids),
        embeddings=rows,
        row_labels=row_labels,
        embed_dim=rows.shape[1],
        support_size=support_size,
        seed=seed,
        mode=mode,
    )


def build_gallery(
    embedder: nn.Module,
    manifest: DatasetManifest,
    transform: Callable,
    support_per_class: int = 3,
    seed: int = 0,
    mode: GalleryMode = GalleryMode.MEAN,
    device: Optional[torch.device] = None,
    batch_size: int = 32,
    out_size: int = 224,
) -> EmbeddingGallery:
    """
    Embed a seeded train-only support set and store one mean row per class
    (or every support image in per-image mode).
    """
    device = device or torch.device("cpu")
    support = select_support(manifest, support_per_class, seed)
    class_ids = list(support)
    flat = [r for cid in class_ids for r in support[cid]]
    embeddings = embed_records(embedder, flat, transform, device, batch_size, out_size)
    per_class = [
        embeddings[i * support_per_class : (i + 1) * support_per_class] for i in range(len(class_ids))
    ]
    gallery = gallery_from_embeddings(class_ids, per_class, support_per_class, seed, mode)
    logger.info(
        f"Built {gallery.mode.value} gallery: {len(gallery.row_labels)} rows × {gallery.embed_dim}"
    )
    return gallery


def _nearest(queries: np.ndarray, g: EmbeddingGallery, k: int) -> tuple[np.ndarray, np.ndarray]:
    # one query at a time: memory stays at rows x dim
    rows = g.embeddings.astype(np.float64)
    labels = np.asarray(g.row_labels)
    out = np.empty(len(queries), dtype=np.int64)
    nearest = np.empty(len(queries), dtype=np.float64)
    for qi, query in enumerate(queries.astype(np.float64)):
        dist = ((rows - query) ** 2).sum(axis=1)
        order = np.lexsort((labels, dist))[:k]
        nearest[qi] = dist[order[0]]
        if k == 1:
            out[qi] = labels[order[0]]
            continue
        votes = np.bincount(labels[order], minlength=g.num_classes)
        out[qi] = int(np.argmax(votes))
    return out, np.sqrt(nearest)


def classify_many(queries: np.ndarray, g: EmbeddingGallery, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """
    Label indices and nearest-row distances for a batch of queries.

    Raises:
        EmptyGalleryError: If the gallery has no rows.
        InvalidEmbeddingError: On dimension mismatch.
    """
    queries = np.atleast_2d(np.asarray(queries))
    if g.embeddings.shape[0] == 0:
        raise EmptyGalleryError("gallery is empty")
    if queries.shape[1] != g.embed_dim:
        raise InvalidEmbeddingError(f"query dim {queries.shape[1]} != gallery dim {g.embed_dim}")
    if k < 1 or k > len(g.row_labels):
        raise ValueError(f"k must be in [1, {len(g.row_labels)}]")
    return _nearest(queries, g, k)


def classify(query: np.ndarray, g: EmbeddingGallery, k: int = 1) -> str:
    """
    Identify one query embedding.

    k=1 returns the class of the nearest row; k>1 the majority class among
    the k nearest rows. Distance ties and vote ties go to the lowest class
    index.
    """
    labels, _ = classify_many(np.asarray(query).reshape(1, -1), g, k)
    return g.class_ids[int(labels[0])]


def predict_siamese(
    embedder: nn.Module,
    gallery: EmbeddingGallery,
    records: list[ImageRecord],
    transform: Callable,
    k: int = 1,
    device: Optional[torch.device] = None,
    batch_size: int = 32,
    out_size: int = 224,
) -> list[Prediction]:
    """Per-image gallery predictions with the nearest-row distance as score."""
    device = device or torch.device("cpu")
    if not records:
        return []
    queries = embed_records(embedder, records, transform, device, batch_size, out_size)
    labels, distances = classify_many(queries, gallery, k)
    return [
        Prediction(
            path=r.path,
            true_class=r.class_id,
            predicted_class=gallery.class_ids[int(label)],
            score=float(dist),
        )
        for r, label, dist in zip(records, labels, distances)
    ]


def evaluate_siamese(
    embedder: nn.Module,
    gallery: EmbeddingGallery,
    split_records: list[ImageRecord],
    transform: Callable,
    k: int = 1,
    device: Optional[torch.device] = None,
    batch_size: int = 32,
    out_size: int = 224,
) -> float:
    """Fraction of records whose gallery prediction equals their class."""
    predictions = predict_siamese(
        embedder, gallery, split_records, transform, k, device, batch_size, out_size
    )
    if not predictions:
        return 0.0
    return sum(p.correct for p in predictions) / len(predictions)


def save_gallery(g: EmbeddingGallery, path: Path) -> Path:
    """One JSON header line, then float32 little-endian row-major data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": GALLERY_SCHEMA,
        "classes": g.num_classes,
        "rows": int(g.embeddings.shape[0]),
        "embed_dim": g.embed_dim,
        "support_size": g.support_size,
        "seed": g.seed,
        "mode": g.mode.value,
        "class_ids": g.class_ids,
        "row_labels": list(g.row_labels),
    }
    body = np.ascontiguousarray(g.embeddings, dtype="<f4").tobytes()
    path.write_bytes(json.dumps(header).encode("utf-8") + b"\n" + body)
    return path


def load_gallery(path: Path) -> EmbeddingGallery:
    """
    Read a gallery written by save_gallery.

    Raises:
        GalleryParseError: On a missing or malformed header, or a body whose
            size disagrees with it.
        SchemaVersionError: If the header names another schema.
    """
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise GalleryParseError(str(path), "no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise GalleryParseError(str(path), f"invalid header: {e}")
    if not isinstance(header, dict):
        raise GalleryParseError(str(path), "header is not an object")
    if header.get("schema") != GALLERY_SCHEMA:
        raise SchemaVersionError(f"{path}: unsupported gallery schema {header.get('schema')!r}")
    try:
        rows, dim = int(header["rows"]), int(header["embed_dim"])
    except (KeyError, TypeError, ValueError) as e:
        raise GalleryParseError(str(path), f"header lacks rows/embed_dim: {e}")
    body = raw[newline + 1 :]
    if len(body) != rows * dim * 4:
        raise GalleryParseError(str(path), f"body has {len(body)} bytes, header promises {rows * dim * 4}")
    matrix = np.frombuffer(body, dtype="<f4").reshape(rows, dim)
    return EmbeddingGallery(
        class_ids=header["class_ids"],
        embeddings=matrix.astype(np.float32),
        row_labels=header["row_labels"],
        embed_dim=header["embed_dim"],
        support_size=header["support_size"],
        seed=header["seed"],
        mode=GalleryMode(header["mode"]),
    )
