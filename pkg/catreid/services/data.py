"""Torch datasets over manifest records."""

import logging
from pathlib import Path
from typing import Callable

import torch
from PIL import Image
from torch.utils.data import Dataset, get_worker_info

from catreid.core.seeding import derive_seed
from catreid.schemas.dataset import DatasetManifest, ImageRecord, Split
from catreid.services.augment_service import SeededTransform
from catreid.services.preprocess_service import load_image

logger = logging.getLogger(__name__)


def image_path(record: ImageRecord) -> Path:
    """The crop when preprocessing ran, the source image otherwise."""
    return Path(record.crop_path or record.path)


def load_crop(record: ImageRecord, out_size: int = 224) -> Image.Image:
    image = load_image(image_path(record))
    if image.size != (out_size, out_size):
        image = image.resize((out_size, out_size), Image.Resampling.BILINEAR)
    return image


class ManifestImageDataset(Dataset):
    """(image tensor, label) pairs for one split of a manifest."""

    def __init__(
        self,
        records: list[ImageRecord],
        class_index: dict[str, int],
        transform: Callable,
        out_size: int = 224,
    ):
        self.records = records
        self.class_index = class_index
        self.transform = transform
        self.out_size = out_size
        self.labels = [class_index[r.class_id] for r in records]

    @classmethod
    def for_split(
        cls,
        m: DatasetManifest,
        split: Split,
        transform: Callable,
        out_size: int = 224,
    ) -> "ManifestImageDataset":
        return cls(m.records_in(split), m.class_index, transform, out_size)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, int]:
        record = self.records[idx]
        return self.transform(load_crop(record, self.out_size)), self.labels[idx]


def seed_worker(worker_id: int) -> None:
    """
    DataLoader worker_init_fn: give each worker its own augmentation stream.

    `info.seed` is drawn fresh from the loader every epoch, so non-persistent
    workers do not replay the previous epoch's draws.
    """
    info = get_worker_info()
    if info is None:
        return
    transform = getattr(info.dataset, "transform", None)
    if isinstance(transform, SeededTransform):
        transform.reseed(derive_seed(transform.seed, f"worker{info.seed}"))

