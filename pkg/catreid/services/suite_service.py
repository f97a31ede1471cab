"""Loading experiment suite files."""

import logging
from pathlib import Path
from typing import Union

import yaml
from pydantic import ValidationError

from catreid.core.exceptions import ConfigValidationError
from catreid.schemas.suite import SuiteConfig
from catreid.schemas.training import RunConfig

logger = logging.getLogger(__name__)


def describe_validation_error(e: ValidationError) -> str:
    """First validation problem as one line: `loc.path: message`."""
    first = e.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ())) or "config"
    return f"{location}: {first.get('msg', 'invalid value')}"


def parse_suite(text: str, base: Path) -> SuiteConfig:
    """Validate suite YAML text; relative paths resolve against `base`."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigValidationError(f"suite is not valid YAML: {e}")
    if not isinstance(raw, dict):
        raise ConfigValidationError("suite must be a mapping")
    try:
        suite = SuiteConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigValidationError(f"invalid suite: {describe_validation_error(e)}")
    return suite.resolve(base)


def load_suite(path: Union[str, Path]) -> SuiteConfig:
    """
    Read and validate a suite file.

    Raises:
        ConfigValidationError: Missing file, bad YAML, or any invalid field
            (including RunConfig invariants such as mode/loss agreement).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigValidationError(f"config file not found: {path}")
    suite = parse_suite(path.read_text(encoding="utf-8"), path.parent)
    logger.debug(f"Loaded suite {path} with runs {sorted(suite.runs)}")
    return suite


def run_config(suite: SuiteConfig, name: str) -> RunConfig:
    if name not in suite.runs:
        raise ConfigValidationError(
            f"no run named '{name}' in suite (available: {', '.join(sorted(suite.runs)) or 'none'})"
        )
    return suite.runs[name]
