"""Seed derivation, config hashing and determinism switches."""

import hashlib
import json
import logging
from typing import Any

import numpy as np
import torch
from pydantic import BaseModel

logger = logging.getLogger(__name__)


def derive_seed(seed: int, stream: str) -> int:
    """Derive a 63-bit seed for a named RNG stream."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Numpy generator for one named stream."""
    return np.random.default_rng(derive_seed(seed, stream))


def torch_generator(seed: int, stream: str) -> torch.Generator:
    """Torch CPU generator for one named stream."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, stream))
    return gen


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed torch's global generators and optionally force deterministic kernels."""
    torch.manual_seed(derive_seed(seed, "torch"))
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        logger.info("Deterministic algorithms enabled")


def config_hash(config: BaseModel | dict[str, Any]) -> str:
    """Short stable hash of a configuration."""
    payload = config.model_dump(mode="json") if isinstance(config, BaseModel) else config
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def file_sha256(data: bytes) -> str:
    """Hex sha256 of a byte string."""
    return hashlib.sha256(data).hexdigest()
