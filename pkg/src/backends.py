"""Detection backends behind the poisoning proxy.

The proxy never runs a detector itself: a FileOracle serves a canned dump,
a RemoteBackend forwards to an HTTP detector exposing POST /detect.
"""
import logging
from typing import Any, Dict, Optional, Tuple

import httpx
import numpy as np

from .data_loader import load_detection_records
from .errors import BackendUnavailable, UnknownImageError
from .geometry import ImageDetections
from .poisoner import BackendKind, BackendSpec

logger = logging.getLogger(__name__)

# (detections, per-object feature rows or None)
BackendResult = Tuple[ImageDetections, Optional[np.ndarray]]


def _split_record(record: Dict[str, Any]) -> BackendResult:
    detections = ImageDetections.from_record(record)
    objects = record.get("objects", [])
    if objects and all("features" in o for o in objects):
        return detections, np.asarray([o["features"] for o in objects], dtype=np.float64)
    return detections, None


class FileOracleBackend:
    """Serves detections from a line-delimited dump keyed by image_id."""

    kind = BackendKind.FILE

    def __init__(self, path: str):
        self.path = path
        self.records = {str(r["image_id"]): r for r in load_detection_records(path)}
        logger.info("[OK] File oracle loaded %d images from %s", len(self.records), path)

    def probe(self) -> None:
        return None

    def detect(self, image_id: str, width: Optional[float] = None, height: Optional[float] = None) -> BackendResult:
        record = self.records.get(image_id)
        if record is None:
            raise UnknownImageError(image_id)
        return _split_record(record)

    def close(self) -> None:
        return None


class RemoteBackend:
    """Forwards detect calls to a remote detector over HTTP."""

    kind = BackendKind.REMOTE

    def __init__(self, url: str, timeout: float = 10.0, client: Optional[httpx.Client] = None):
        self.url = url.rstrip("/")
        self.client = client or httpx.Client(timeout=timeout)

    def probe(self) -> None:
        try:
            self.client.get(f"{self.url}/health")
        except httpx.HTTPError as e:
            raise BackendUnavailable(f"backend {self.url} unreachable: {e}", url=self.url)

    def detect(self, image_id: str, width: Optional[float] = None, height: Optional[float] = None) -> BackendResult:
        payload = {"image_id": image_id, "width": width, "height": height}
        try:
            response = self.client.post(f"{self.url}/detect", json=payload)
        except httpx.HTTPError as e:
            raise BackendUnavailable(f"backend {self.url} unreachable: {e}", url=self.url)
        if response.status_code == 404:
            raise UnknownImageError(image_id)
        if response.status_code >= 400:
            raise BackendUnavailable(
                f"backend {self.url} answered {response.status_code}", url=self.url)
        try:
            return _split_record(response.json())
        except (KeyError, TypeError, ValueError) as e:
            raise BackendUnavailable(f"backend {self.url} sent a malformed record: {e}", url=self.url)

    def close(self) -> None:
        self.client.close()


def make_backend(spec: BackendSpec):
    if spec.kind is BackendKind.FILE:
        return FileOracleBackend(spec.location)
    return RemoteBackend(spec.location)
