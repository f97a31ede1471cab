"""Procedural test dataset: one fur color and stripe pattern per individual."""

import colorsys
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel

from catreid.core.seeding import rng_for

logger = logging.getLogger(__name__)

DETECTIONS_FILE = "detections.json"


class SynthSummary(BaseModel):
    out_dir: str
    classes: int
    images: int
    detections_file: str


def class_sizes(classes: int, per_class: int = 20, total: Optional[int] = None) -> list[int]:
    """Images per class; with `total`, spread as evenly as possible (larger classes first)."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if total is None:
        sizes = [per_class] * classes
    else:
        base, extra = divmod(total, classes)
        sizes = [base + (1 if i < extra else 0) for i in range(classes)]
    if min(sizes) < 6:
        raise ValueError("every class needs at least 6 images")
    return sizes


def class_color(index: int, classes: int) -> tuple[int, int, int]:
    """Evenly spaced hues, alternating two brightness levels."""
    hue = index / classes
    value = 0.9 if index % 2 == 0 else 0.6
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, value)
    return int(r * 255), int(g * 255), int(b * 255)


def draw_subject(
    rng: np.random.Generator,
    color: tuple[int, int, int],
    stripes: int,
    size: tuple[int, int] = (128, 96),
) -> tuple[Image.Image, tuple[float, float, float, float]]:
    """One image with a single striped blob; returns the image and its (x, y, w, h) box."""
    width, height = size
    background = rng.integers(90, 160, size=(height, width, 3), dtype=np.uint8)
    image = Image.fromarray(background, mode="RGB")
    draw = ImageDraw.Draw(image)

    w = int(rng.integers(width * 4 // 10, width * 7 // 10))
    h = int(rng.integers(height * 4 // 10, height * 7 // 10))
    x = int(rng.integers(0, width - w))
    y = int(rng.integers(0, height - h))
    shade = float(rng.uniform(0.9, 1.1))
    fur = tuple(int(min(255, c * shade)) for c in color)
    draw.ellipse((x, y, x + w - 1, y + h - 1), fill=fur)

    dark = tuple(c // 3 for c in fur)
    for k in range(stripes):
        sx = x + (k + 1) * w // (stripes + 1)
        draw.line((sx, y + h // 4, sx, y + 3 * h // 4), fill=dark, width=max(1, w // 20))
    return image, (float(x), float(y), float(w), float(h))


def synthesize(
    out_dir: Path,
    classes: int = 5,
    per_class: int = 20,
    seed: int = 0,
    total: Optional[int] = None,
    size: tuple[int, int] = (128, 96),
) -> SynthSummary:
    """
    Write a folder-per-class dataset plus a stub-detector file of subject boxes.

    Output is a pure function of the arguments, so two calls with the same
    seed produce byte-identical files.
    """
    out_dir = Path(out_dir)
    sizes = class_sizes(classes, per_class, total)
    detections: dict[str, dict] = {}

    for index, count in enumerate(sizes):
        class_id = f"cat_{index:04d}"
        class_dir = out_dir / class_id
        class_dir.mkdir(parents=True, exist_ok=True)
        color = class_color(index, classes)
        stripes = 1 + index % 4
        for j in range(count):
            rng = rng_for(seed, f"synth/{index}/{j}")
            image, bbox = draw_subject(rng, color, stripes, size)
            name = f"{j:03d}.png"
            image.save(class_dir / name, format="PNG")
            detections[f"{class_id}/{name}"] = {
                "detections": [{"bbox": list(bbox), "confidence": 0.99, "class_label": "cat"}]
            }

    detections_path = out_dir / DETECTIONS_FILE
    detections_path.write_text(json.dumps(detections, indent=1, sort_keys=True))
    summary = SynthSummary(
        out_dir=str(out_dir),
        classes=classes,
        images=sum(sizes),
        detections_file=str(detections_path),
    )
    logger.info(f"Synthesized {summary.images} images in {classes} classes under {out_dir}")
    return summary
