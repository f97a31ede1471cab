"""Seeded augmentation pipelines built on torchvision transforms v2."""

import logging
from typing import Callable, Optional, Union

import torch
from PIL import Image
from torchvision.transforms import v2

from catreid.core.seeding import derive_seed
from catreid.schemas.augment import AugmentConfig

logger = logging.getLogger(__name__)

ImageInput = Union[Image.Image, torch.Tensor]


def cutout(
    image: torch.Tensor,
    count: int,
    max_side_frac: float,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Black out `count` random axis-aligned rectangles.

    Sides are drawn uniformly in [1, max_side_frac * size] and positions
    uniformly over the image (rectangles are clipped at the border). Other
    pixels are left untouched.

    Args:
        image: (C, H, W) tensor.
        count: Number of rectangles, >= 1.
        max_side_frac: Largest side as a fraction of the image side.
        rng: Generator; the global torch generator when None.
    """
    if count < 1:
        raise ValueError("cutout count must be >= 1")
    out = image.clone()
    _, height, width = out.shape
    max_h = max(1, int(max_side_frac * height))
    max_w = max(1, int(max_side_frac * width))
    for _ in range(count):
        rect_h = int(torch.randint(1, max_h + 1, (1,), generator=rng))
        rect_w = int(torch.randint(1, max_w + 1, (1,), generator=rng))
        cy = int(torch.randint(0, height, (1,), generator=rng))
        cx = int(torch.randint(0, width, (1,), generator=rng))
        y0, x0 = max(0, cy - rect_h // 2), max(0, cx - rect_w // 2)
        y1, x1 = min(height, y0 + rect_h), min(width, x0 + rect_w)
        out[:, y0:y1, x0:x1] = 0
    return out


class RandomCutout(torch.nn.Module):
    """Transform wrapper around cutout()."""

    def __init__(self, count: int, max_side_frac: float):
        super().__init__()
        self.count = count
        self.max_side_frac = max_side_frac

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return cutout(image, self.count, self.max_side_frac)


class RandomGaussianNoise(torch.nn.Module):
    """Add N(0, sigma²) noise with probability p to a [0, 1] float image."""

    def __init__(self, sigma: float, p: float):
        super().__init__()
        self.sigma = sigma
        self.p = p

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if torch.rand(1).item() >= self.p:
            return image
        return (image + torch.randn_like(image) * self.sigma).clamp_(0.0, 1.0)


def _to_float_tensor() -> list[Callable]:
    return [v2.ToImage(), v2.ToDtype(torch.float32, scale=True)]


def _normalize(cfg: AugmentConfig) -> v2.Normalize:
    mean, std = cfg.normalize
    return v2.Normalize(mean=list(mean), std=list(std))


class SeededTransform:
    """
    Applies a transform with per-image randomness drawn from its own stream.

    Each call draws a fresh seed from the owned generator and runs the wrapped
    transform under a forked global RNG seeded with it, so the sequence of
    outputs is fixed by the construction seed.
    """

    def __init__(self, transform: Callable, seed: int):
        self.transform = transform
        self.seed = seed
        self._gen = torch.Generator()
        self._gen.manual_seed(derive_seed(seed, "augment"))

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self._gen.manual_seed(derive_seed(seed, "augment"))

    def __call__(self, image: ImageInput) -> torch.Tensor:
        call_seed = int(torch.randint(0, 2**62, (1,), generator=self._gen))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(call_seed)
            return self.transform(image)


def build_train_pipeline(cfg: AugmentConfig, seed: int) -> SeededTransform:
    """
    Training transform: flip, rotation, translation, blur, noise, jitter,
    perspective, cutout, then normalization.

    Stages whose probability or magnitude is zero are left out, so an
    all-zero config reduces to normalization.
    """
    stages: list[Callable] = _to_float_tensor()
    if cfg.hflip_p > 0:
        stages.append(v2.RandomHorizontalFlip(p=cfg.hflip_p))
    if cfg.rotation_deg > 0:
        stages.append(v2.RandomRotation(degrees=cfg.rotation_deg, fill=0))
    if cfg.translate_frac > 0:
        stages.append(
            v2.RandomAffine(degrees=0, translate=(cfg.translate_frac, cfg.translate_frac), fill=0)
        )
    if cfg.blur_p > 0:
        stages.append(
            v2.RandomApply([v2.GaussianBlur(kernel_size=9, sigma=cfg.blur_sigma_range)], p=cfg.blur_p)
        )
    if cfg.noise_p > 0 and cfg.noise_sigma > 0:
        stages.append(RandomGaussianNoise(cfg.noise_sigma, cfg.noise_p))
    if any(v > 0 for v in cfg.jitter):
        brightness, contrast, saturation, hue = cfg.jitter
        stages.append(
            v2.ColorJitter(brightness=brightness, contrast=contrast, saturation=saturation, hue=hue)
        )
    distortion, perspective_p = cfg.perspective
    if distortion > 0 and perspective_p > 0:
        stages.append(v2.RandomPerspective(distortion_scale=distortion, p=perspective_p, fill=0))
    count, max_side_frac = cfg.cutout
    if count > 0:
        stages.append(RandomCutout(count, max_side_frac))
    stages.append(_normalize(cfg))

    logger.debug(f"Train pipeline: {[type(s).__name__ for s in stages]}")
    return SeededTransform(v2.Compose(stages), seed)


def build_eval_pipeline(cfg: AugmentConfig) -> v2.Compose:
    """Deterministic transform for val/test crops: scale to [0, 1] and normalize."""
    return v2.Compose(_to_float_tensor() + [_normalize(cfg)])


def denormalize(tensor: torch.Tensor, cfg: AugmentConfig) -> torch.Tensor:
    """Invert the normalization of a (C, H, W) or (B, C, H, W) tensor."""
    mean, std = cfg.normalize
    shape = (3, 1, 1) if tensor.dim() == 3 else (1, 3, 1, 1)
    mean_t = torch.tensor(mean, dtype=tensor.dtype).view(shape)
    std_t = torch.tensor(std, dtype=tensor.dtype).view(shape)
    return tensor * std_t + mean_t
