"""Dataset ingestion, class filtering, splitting and manifest persistence."""

import json
import logging
from collections import defaultdict
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from catreid.core.exceptions import (
    ClassTooSmallError,
    DatasetEmptyError,
    ManifestError,
    ManifestParseError,
    SchemaVersionError,
    StageOrderError,
)
from catreid.core.seeding import file_sha256, rng_for
from catreid.schemas.dataset import (
    MANIFEST_SCHEMA,
    DatasetManifest,
    ErrorEntry,
    ExclusionReason,
    ImageRecord,
    Split,
    Stage,
)

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp", ".tif", ".tiff"}


def _image_size(path: Path) -> tuple[int, int] | None:
    """Return (W, H) if `path` decodes as an image."""
    if path.suffix.lower() not in IMAGE_EXTENSIONS:
        return None
    try:
        with Image.open(path) as image:
            image.verify()
        with Image.open(path) as image:
            return image.size
    except (UnidentifiedImageError, OSError, SyntaxError):
        return None


def build_class_index(records: list[ImageRecord]) -> dict[str, int]:
    """Contiguous labels over non-excluded classes in lexicographic order."""
    survivors = sorted({r.class_id for r in records if not r.is_excluded})
    return {class_id: label for label, class_id in enumerate(survivors)}


def ingest(root_dir: Path, seed: int = 0, verify: bool = True) -> DatasetManifest:
    """
    Materialize a folder-per-class collection into a manifest.

    Args:
        root_dir: Directory with one subdirectory per individual.
        seed: Seed recorded in the manifest.
        verify: Decode every file to catch corrupt images.

    Returns:
        Manifest with one record per file, sorted by path. Unreadable files
        are excluded and listed in ``errors``.

    Raises:
        ManifestError: If the root is missing.
        DatasetEmptyError: If no class directory exists.
    """
    root_dir = Path(root_dir)
    if not root_dir.is_dir():
        raise ManifestError(f"dataset root not found: {root_dir}")

    class_dirs = sorted(p for p in root_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetEmptyError("no classes found")

    records: list[ImageRecord] = []
    errors: list[ErrorEntry] = []
    for class_dir in class_dirs:
        for path in sorted(p for p in class_dir.iterdir() if p.is_file()):
            if verify:
                size = _image_size(path)
                readable = size is not None
            else:
                size = None
                readable = path.suffix.lower() in IMAGE_EXTENSIONS
            if not readable:
                logger.warning(f"Unreadable file flagged: {path}")
                errors.append(ErrorEntry(path=str(path), reason=ExclusionReason.UNREADABLE.value))
                records.append(
                    ImageRecord(
                        path=str(path),
                        class_id=class_dir.name,
                        split=Split.EXCLUDED,
                        exclusion_reason=ExclusionReason.UNREADABLE,
                    )
                )
                continue
            records.append(
                ImageRecord(
                    path=str(path),
                    class_id=class_dir.name,
                    source_size=size,
                )
            )

    records.sort(key=lambda r: r.path)
    manifest = DatasetManifest(
        records=records,
        class_index=build_class_index(records),
        seed=seed,
        stages=[Stage.INGESTED],
        errors=errors,
    )
    logger.info(
        f"Ingested {len(records)} files in {len(class_dirs)} classes from {root_dir} "
        f"({len(errors)} unreadable)"
    )
    return manifest


def filter_small_classes(m: DatasetManifest, min_images: int = 8) -> DatasetManifest:
    """
    Exclude every class with fewer than `min_images` usable images.

    Records already excluded for another reason do not count. Running the
    filter twice yields the same manifest.

    Raises:
        ValueError: If min_images < 6.
        DatasetEmptyError: If every class is filtered out.
    """
    if min_images < 6:
        raise ValueError("min_images must be >= 6")

    usable: dict[str, int] = defaultdict(int)
    for record in m.records:
        if not record.is_excluded:
            usable[record.class_id] += 1
    small = {cid for cid, count in usable.items() if count < min_images}

    records = [
        r.excluded(ExclusionReason.CLASS_TOO_SMALL)
        if r.class_id in small and not r.is_excluded
        else r
        for r in m.records
    ]
    class_index = build_class_index(records)
    if not class_index:
        raise DatasetEmptyError("empty dataset after filtering")

    removed = sum(usable[cid] for cid in small)
    if small:
        logger.info(
            f"Excluded {len(small)} classes ({removed} images) below {min_images} images; "
            f"{len(class_index)} classes remain"
        )
    return m.with_stage(
        Stage.FILTERED,
        records=records,
        class_index=class_index,
        min_images=min_images,
    )


def split(
    m: DatasetManifest,
    val_per_class: int = 3,
    test_per_class: int = 2,
    seed: int = 0,
) -> DatasetManifest:
    """
    Assign val/test/train per class by a seeded shuffle.

    One RNG stream (derived from the seed and the operation name) is drawn
    in lexicographic class order, so the result depends only on the manifest
    and the seed. Re-splitting an already split manifest reassigns every
    non-excluded record.

    Raises:
        ClassTooSmallError: If a class has fewer than val + test + 1 images.
    """
    need = val_per_class + test_per_class + 1
    by_class: dict[str, list[int]] = defaultdict(list)
    for idx, record in enumerate(m.records):
        if not record.is_excluded:
            by_class[record.class_id].append(idx)

    for class_id in sorted(by_class):
        if len(by_class[class_id]) < need:
            raise ClassTooSmallError(class_id, len(by_class[class_id]), need)

    rng = rng_for(seed, "split")
    assignment: dict[int, Split] = {}
    for class_id in sorted(by_class):
        indices = by_class[class_id]
        order = rng.permutation(len(indices))
        for rank, pos in enumerate(order):
            if rank < val_per_class:
                assignment[indices[pos]] = Split.VAL
            elif rank < val_per_class + test_per_class:
                assignment[indices[pos]] = Split.TEST
            else:
                assignment[indices[pos]] = Split.TRAIN

    records = [
        r.model_copy(update={"split": assignment[i]}) if i in assignment else r
        for i, r in enumerate(m.records)
    ]
    result = m.with_stage(Stage.SPLIT, records=records, seed=seed, class_index=build_class_index(records))
    logger.info(
        f"Split {len(by_class)} classes with seed {seed}: "
        f"{len(result.records_in(Split.TRAIN))} train, "
        f"{len(result.records_in(Split.VAL))} val, "
        f"{len(result.records_in(Split.TEST))} test"
    )
    return result


def require_stage(m: DatasetManifest, stage: Stage, action: str) -> None:
    """Raise StageOrderError unless the manifest has been through `stage`."""
    if not m.has_stage(stage):
        raise StageOrderError(f"{action} needs a manifest that has been {stage.value}")


def _record_line(record: ImageRecord) -> str:
    payload = record.model_dump(mode="json")
    ordered = {
        key: payload[key]
        for key in ("path", "class_id", "split", "bbox", "exclusion_reason")
    }
    ordered.update(
        {k: v for k, v in payload.items() if k not in ordered and v is not None}
    )
    return json.dumps(ordered, sort_keys=False)


def manifest_header(m: DatasetManifest) -> dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "seed": m.seed,
        "classes": m.num_classes,
        "records": len(m.records),
        "stages": [s.value for s in m.stages],
        "min_images": m.min_images,
        "class_index": m.class_index,
        "errors": [e.model_dump() for e in m.errors],
        "stats": {cid: c.model_dump() for cid, c in m.stats.items()},
    }


def dumps_manifest(m: DatasetManifest) -> str:
    lines = [json.dumps(manifest_header(m))]
    lines.extend(_record_line(r) for r in m.records)
    return "\n".join(lines) + "\n"


def save_manifest(m: DatasetManifest, path: Path) -> Path:
    """Write the manifest as a JSON header line plus one JSON line per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_manifest(m), encoding="utf-8")
    tmp.replace(path)
    logger.info(f"Saved manifest with {len(m.records)} records to {path}")
    return path


def load_manifest(path: Path) -> DatasetManifest:
    """
    Read a manifest written by save_manifest.

    Raises:
        ManifestError: If the file is missing.
        ManifestParseError: On malformed or truncated content (with line number).
        SchemaVersionError: If the header names another schema.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestParseError(str(path), 1, "empty file")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestParseError(str(path), 1, f"invalid header: {e.msg}")
    if header.get("schema") != MANIFEST_SCHEMA:
        raise SchemaVersionError(
            f"{path}: unsupported manifest schema {header.get('schema')!r} "
            f"(expected {MANIFEST_SCHEMA})"
        )

    records: list[ImageRecord] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(ImageRecord.model_validate(json.loads(line)))
        except json.JSONDecodeError as e:
            raise ManifestParseError(str(path), lineno, f"invalid JSON: {e.msg}")
        except ValueError as e:
            raise ManifestParseError(str(path), lineno, f"invalid record: {e}")

    expected = header.get("records")
    if expected is not None and expected != len(records):
        raise ManifestParseError(
            str(path),
            len(lines) + 1,
            f"truncated: header declares {expected} records, found {len(records)}",
        )

    return DatasetManifest(
        records=records,
        class_index=header.get("class_index") or build_class_index(records),
        seed=header.get("seed", 0),
        stages=[Stage(s) for s in header.get("stages", [])],
        min_images=header.get("min_images"),
        errors=[ErrorEntry(**e) for e in header.get("errors", [])],
    )


def manifest_data_hash(m: DatasetManifest) -> str:
    """Hash of the record content, used to keep reports on one dataset."""
    body = "\n".join(_record_line(r) for r in m.records)
    return file_sha256(body.encode("utf-8"))[:12]
