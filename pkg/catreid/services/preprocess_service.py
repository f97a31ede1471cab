"""Subject detection, squaring, cropping and the batch crop driver."""

import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Union

from PIL import Image, UnidentifiedImageError
from tqdm import tqdm

from catreid.config import settings
from catreid.core.exceptions import ImageReadError, StageOrderError
from catreid.core.seeding import file_sha256
from catreid.schemas.dataset import (
    DatasetManifest,
    ErrorEntry,
    ExclusionReason,
    ImageRecord,
    Stage,
)
from catreid.schemas.preprocess import CropSpec, Detection
from catreid.services.dataset_service import build_class_index, filter_small_classes
from catreid.services.detectors import Detector

logger = logging.getLogger(__name__)


def _round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


def load_image(path: Union[str, Path]) -> Image.Image:
    """Decode an image file as RGB, naming the path on failure."""
    try:
        with Image.open(path) as image:
            return image.convert("RGB")
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise ImageReadError(str(path), f"cannot read image ({e.__class__.__name__})")


def detect_subject(
    image: Image.Image,
    detector: Detector,
    conf_threshold: float = 0.5,
    path: Optional[Path] = None,
    target_label: str = "cat",
) -> Union[Detection, ExclusionReason]:
    """
    Ask the detector for the single subject in an image.

    Returns:
        The detection when exactly one target-class box scores strictly above
        the threshold,
        ``NO_DETECTION`` when none does and ``MULTI_SUBJECT`` when several do.

    Raises:
        DetectorUnavailableError: Propagated from the detector; never turned
            into an exclusion.
    """
    candidates = [
        d
        for d in detector(image, path=path)
        if d.class_label == target_label and d.confidence > conf_threshold
    ]
    if not candidates:
        return ExclusionReason.NO_DETECTION
    if len(candidates) > 1:
        return ExclusionReason.MULTI_SUBJECT
    return candidates[0]


def square_bbox(d: Detection, source_dims: tuple[int, int]) -> CropSpec:
    """Square the box around its center; the square may leave the image."""
    x, y, w, h = d.bbox
    side = max(math.ceil(w), math.ceil(h), 1)
    cx, cy = x + w / 2.0, y + h / 2.0
    x0 = _round_half_up(cx - side / 2.0)
    y0 = _round_half_up(cy - side / 2.0)
    return CropSpec(source_dims=tuple(source_dims), square_bbox=(x0, y0, side, side))


def clamp_bbox(bbox: tuple[float, float, float, float], source_dims: tuple[int, int]):
    """Clip (x, y, w, h) to the image; None when nothing is left."""
    x, y, w, h = bbox
    width, height = source_dims
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(width), x + w), min(float(height), y + h)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def crop_and_resize(image: Image.Image, spec: CropSpec, out_size: int = 224) -> Image.Image:
    """
    Cut the square window out of `image` and resize it to out_size × out_size.

    Only the in-bounds part is resampled (bilinear) and pasted onto a black
    canvas, so padding pixels are exactly (0, 0, 0).
    """
    image = image.convert("RGB")
    if tuple(image.size) != tuple(spec.source_dims):
        raise ValueError(f"image size {image.size} does not match crop spec {spec.source_dims}")

    canvas = Image.new("RGB", (out_size, out_size), spec.pad_color)
    box = spec.in_bounds_box
    if box is None:
        return canvas

    x, y, side, _ = spec.square_bbox
    scale = out_size / side
    x0, y0, x1, y1 = box
    ox0, oy0 = _round_half_up((x0 - x) * scale), _round_half_up((y0 - y) * scale)
    ox1, oy1 = _round_half_up((x1 - x) * scale), _round_half_up((y1 - y) * scale)
    if ox1 <= ox0 or oy1 <= oy0:
        return canvas

    region = image.crop(box).resize((ox1 - ox0, oy1 - oy0), Image.Resampling.BILINEAR)
    canvas.paste(region, (ox0, oy0))
    return canvas


def _png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def crop_target(out_dir: Path, record: ImageRecord) -> Path:
    return Path(out_dir) / record.class_id / f"{Path(record.path).stem}.png"


class _Outcome:
    __slots__ = ("record", "written", "error")

    def __init__(self, record: ImageRecord, written: bool = False, error: Optional[ErrorEntry] = None):
        self.record = record
        self.written = written
        self.error = error


def _already_done(record: ImageRecord) -> bool:
    if not record.crop_path or not record.crop_sha256:
        return False
    path = Path(record.crop_path)
    return path.is_file() and file_sha256(path.read_bytes()) == record.crop_sha256


def _process_record(
    record: ImageRecord,
    detector: Detector,
    out_dir: Path,
    conf_threshold: float,
    out_size: int,
    target_label: str,
) -> _Outcome:
    if record.is_excluded or _already_done(record):
        return _Outcome(record)

    try:
        image = load_image(record.path)
    except ImageReadError as e:
        logger.error(f"Excluding unreadable image: {e.detail}")
        return _Outcome(
            record.excluded(ExclusionReason.UNREADABLE),
            error=ErrorEntry(path=record.path, reason=ExclusionReason.UNREADABLE.value),
        )

    result = detect_subject(
        image, detector, conf_threshold, path=Path(record.path), target_label=target_label
    )
    if isinstance(result, ExclusionReason):
        return _Outcome(record.excluded(result).model_copy(update={"source_size": image.size}))

    spec = square_bbox(result, image.size)
    data = _png_bytes(crop_and_resize(image, spec, out_size))
    digest = file_sha256(data)
    target = crop_target(out_dir, record)

    written = False
    if not (target.is_file() and file_sha256(target.read_bytes()) == digest):
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(".png.tmp")
        tmp.write_bytes(data)
        tmp.replace(target)
        written = True

    updated = record.model_copy(
        update={
            "bbox": result.bbox,
            "clamped_bbox": clamp_bbox(result.bbox, image.size),
            "source_size": image.size,
            "crop_path": str(target),
            "crop_sha256": digest,
        }
    )
    return _Outcome(updated, written=written)


def preprocess_manifest(
    m: DatasetManifest,
    detector: Detector,
    out_dir: Path,
    conf_threshold: float = 0.5,
    out_size: int = 224,
    target_label: str = "cat",
    workers: Optional[int] = None,
) -> DatasetManifest:
    """
    Crop every usable record to a square PNG under ``out_dir/<class_id>/``.

    Records are processed independently (in parallel when workers > 1) and
    merged in manifest order. Crops whose content hash already matches the
    file on disk are not rewritten, so a rerun writes nothing. If the
    manifest was class-filtered, the filter is re-applied after the new
    detector exclusions.

    Raises:
        StageOrderError: If the manifest is already split.
        DetectorUnavailableError: If the detector cannot be reached.
    """
    if m.has_stage(Stage.SPLIT):
        raise StageOrderError("preprocess must run before split")

    out_dir = Path(out_dir)
    workers = workers or settings.PREPROCESS_WORKERS

    def run(record: ImageRecord) -> _Outcome:
        return _process_record(record, detector, out_dir, conf_threshold, out_size, target_label)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            iterator = pool.map(run, m.records)
            outcomes = list(
                tqdm(iterator, total=len(m.records), desc="preprocess", disable=not settings.PROGRESS_BARS)
            )
    else:
        outcomes = [
            run(r) for r in tqdm(m.records, desc="preprocess", disable=not settings.PROGRESS_BARS)
        ]

    records = [o.record for o in outcomes]
    errors = list(m.errors) + [o.error for o in outcomes if o.error is not None]
    written = sum(o.written for o in outcomes)

    result = m.with_stage(Stage.PREPROCESSED, records=records, errors=errors)
    if m.min_images is not None:
        result = filter_small_classes(result, m.min_images)
    else:
        result = result.model_copy(update={"class_index": build_class_index(records)})

    logger.info(
        f"Preprocessed {len(records)} records into {out_dir}: {written} files written, "
        f"exclusions {result.exclusion_counts}"
    )
    return result
