"""Pluggable subject detectors.

A detector is any callable taking a PIL image (and optionally its path) and
returning a list of Detections. The toolkit never trains or runs a detection
model itself; it talks to one through these adapters.
"""

import json
import logging
import shlex
import subprocess
import threading
from pathlib import Path
from typing import Optional, Protocol

import httpx
from PIL import Image
from pydantic import ValidationError

from catreid.config import settings
from catreid.core.exceptions import ConfigValidationError, DetectorUnavailableError
from catreid.schemas.preprocess import Detection

logger = logging.getLogger(__name__)


class Detector(Protocol):
    def __call__(self, image: Image.Image, path: Optional[Path] = None) -> list[Detection]: ...


def _parse_detections(payload: dict) -> list[Detection]:
    return [Detection.model_validate(d) for d in payload.get("detections", [])]


def _parse_reply(text: str, source: str) -> list[Detection]:
    try:
        return _parse_detections(json.loads(text))
    except (json.JSONDecodeError, ValidationError, AttributeError, TypeError) as e:
        logger.error(f"Unreadable reply from detector {source}: {e}")
        raise DetectorUnavailableError(f"detector {source} sent an unreadable reply: {e}")


def _read_line(stream, timeout: float) -> Optional[str]:
    """readline with a deadline; None if nothing arrived in time, "" on EOF."""
    box: list[str] = []

    def _read() -> None:
        try:
            box.append(stream.readline())
        except (OSError, ValueError):
            box.append("")

    reader = threading.Thread(target=_read, daemon=True)
    reader.start()
    reader.join(timeout)
    return box[0] if box else None


class StubDetector:
    """Returns configured boxes keyed by image file name (or full path)."""

    def __init__(
        self,
        boxes: dict[str, list[Detection]],
        default: Optional[list[Detection]] = None,
    ):
        self.boxes = boxes
        self.default = default
        self.calls = 0

    @classmethod
    def from_file(cls, path: Path) -> "StubDetector":
        """Load `{key: {"detections": [...]}}` from a JSON file."""
        path = Path(path)
        if not path.is_file():
            raise ConfigValidationError(f"stub detector file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        return cls({key: _parse_detections(value) for key, value in raw.items()})

    def __call__(self, image: Image.Image, path: Optional[Path] = None) -> list[Detection]:
        self.calls += 1
        if path is not None:
            path = Path(path)
            for key in (str(path), f"{path.parent.name}/{path.name}", path.name):
                if key in self.boxes:
                    return list(self.boxes[key])
        if self.default is not None:
            return list(self.default)
        return []


class SubprocessDetector:
    """
    Long-lived child process speaking JSON lines.

    Each request is one line ``{"image_path": ...}``; each reply is one line
    ``{"detections": [...]}``.
    """

    def __init__(self, command: str, timeout: Optional[float] = None):
        self.command = command
        self.timeout = timeout or settings.DETECTOR_TIMEOUT_SECONDS
        self._proc: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()

    def _ensure_started(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    shlex.split(self.command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as e:
                raise DetectorUnavailableError(f"cannot start detector '{self.command}': {e}")
            logger.info(f"Started detector subprocess: {self.command}")
        return self._proc

    def __call__(self, image: Image.Image, path: Optional[Path] = None) -> list[Detection]:
        if path is None:
            raise ValueError("SubprocessDetector needs the image path")
        with self._lock:
            proc = self._ensure_started()
            try:
                proc.stdin.write(json.dumps({"image_path": str(path)}) + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise DetectorUnavailableError(f"detector process failed: {e}")
            line = _read_line(proc.stdout, self.timeout)
            if line is None:
                logger.error(f"Detector '{self.command}' sent no reply within {self.timeout:g}s")
                self._kill()
                raise DetectorUnavailableError(
                    f"detector '{self.command}' did not reply within {self.timeout:g}s"
                )
        if not line:
            raise DetectorUnavailableError("detector process closed its output")
        return _parse_reply(line, f"'{self.command}'")

    def _kill(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        proc.kill()
        try:
            proc.wait(timeout=self.timeout)
        except subprocess.TimeoutExpired:
            logger.warning(f"Detector '{self.command}' did not exit after kill")

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=self.timeout)
        self._proc = None


class HttpDetector:
    """Posts ``{"image_path": ...}`` to a detection endpoint."""

    def __init__(self, url: str, timeout: Optional[float] = None, client: Optional[httpx.Client] = None):
        self.url = url
        self.client = client or httpx.Client(timeout=timeout or settings.DETECTOR_TIMEOUT_SECONDS)

    def __call__(self, image: Image.Image, path: Optional[Path] = None) -> list[Detection]:
        if path is None:
            raise ValueError("HttpDetector needs the image path")
        try:
            response = self.client.post(self.url, json={"image_path": str(path)})
            response.raise_for_status()
        except httpx.HTTPError as e:
            logger.error(f"Detector endpoint {self.url} failed: {e}")
            raise DetectorUnavailableError(f"detector unreachable at {self.url}: {e}")
        return _parse_reply(response.text, f"at {self.url}")

    def close(self) -> None:
        self.client.close()


def make_detector(spec: str) -> Detector:
    """
    Build a detector from a spec string.

    Args:
        spec: ``stub:FILE``, ``http://...``/``https://...`` or ``cmd:COMMAND``.
            A bare path to an existing ``.json`` file is read as a stub file.
    """
    if spec.startswith(("http://", "https://")):
        return HttpDetector(spec)
    if spec.startswith("stub:"):
        return StubDetector.from_file(Path(spec[len("stub:"):]))
    if spec.startswith("cmd:"):
        return SubprocessDetector(spec[len("cmd:"):])
    if spec.endswith(".json") and Path(spec).is_file():
        return StubDetector.from_file(Path(spec))
    raise ConfigValidationError(f"unrecognized detector spec: {spec!r}")
