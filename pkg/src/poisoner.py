"""Response poisoning: rescale (or shift) the boxes of trigger objects only."""
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .config import check_keys
from .errors import AlignmentError, ConfigError, OverflowRejected
from .features import STAT_FEATURE_DIM
from .geometry import ImageDetections, PoisoningPolicy, poison_bb
from .trigger import TriggerModel, load_trigger_model, trigger_flags

logger = logging.getLogger(__name__)


class FeatureSource(str, Enum):
    INLINE_CROPS = "inline_crops"
    INLINE_FEATURES = "inline_features"
    BACKEND_FEATURES = "backend_features"


class BackendKind(str, Enum):
    FILE = "file"
    REMOTE = "remote"


@dataclass(frozen=True)
class BackendSpec:
    kind: BackendKind
    location: str

    @classmethod
    def parse(cls, value: str) -> "BackendSpec":
        """A URL selects the remote endpoint, anything else is a detection dump path."""
        if value.startswith(("http://", "https://")):
            return cls(BackendKind.REMOTE, value.rstrip("/"))
        return cls(BackendKind.FILE, value)

    def to_dict(self) -> Dict[str, str]:
        return {"kind": self.kind.value, "location": self.location}


@dataclass(frozen=True)
class ProxyConfig:
    policy: PoisoningPolicy
    trigger_model: TriggerModel
    backend: BackendSpec
    feature_source: FeatureSource = FeatureSource.INLINE_FEATURES
    log_path: Optional[str] = None
    feature_dim: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "feature_source", FeatureSource(self.feature_source))
        declared = STAT_FEATURE_DIM if self.feature_source is FeatureSource.INLINE_CROPS else self.feature_dim
        if declared is not None and declared != self.trigger_model.m:
            raise ConfigError(
                f"trigger model dimension {self.trigger_model.m} does not match the "
                f"{self.feature_source.value} feature dimension {declared}")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], base_dir: str = ".") -> "ProxyConfig":
        check_keys(doc, {"policy", "trigger_model", "backend", "feature_source",
                         "log_path", "feature_dim"}, "proxy config")
        for key in ("trigger_model", "backend"):
            if key not in doc:
                raise ConfigError(f"proxy config: missing {key!r}")

        def resolve(path):
            return path if os.path.isabs(path) else os.path.join(base_dir, path)

        backend = doc["backend"]
        if isinstance(backend, str):
            spec = BackendSpec.parse(backend)
        else:
            spec = BackendSpec(BackendKind(backend["kind"]), backend["location"])
        if spec.kind is BackendKind.FILE:
            spec = replace(spec, location=resolve(spec.location))
        log_path = doc.get("log_path")
        return cls(
            policy=PoisoningPolicy.from_dict(doc.get("policy", {})),
            trigger_model=load_trigger_model(resolve(doc["trigger_model"])),
            backend=spec,
            feature_source=doc.get("feature_source", FeatureSource.INLINE_FEATURES.value),
            log_path=resolve(log_path) if log_path else None,
            feature_dim=doc.get("feature_dim"),
        )


@dataclass(frozen=True)
class PoisonResult:
    detections: ImageDetections
    flags: Tuple[bool, ...] = field(default_factory=tuple)
    rejected: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_poisoned(self) -> int:
        return sum(self.flags)


def poison_response(detections: ImageDetections, features, config) -> PoisonResult:
    """
    Poison the trigger objects of one backend response.

    `config` is anything with `policy` and `trigger_model` (a ProxyConfig in
    the service). Categories, confidences, order and non-trigger boxes are left
    as they are. Under RejectOverflow an overflowing trigger box is kept
    unpoisoned and reported in `rejected`.
    """
    n_objects = len(detections.objects)
    rows = np.asarray(features if features is not None else [], dtype=np.float64)
    if rows.size == 0:
        rows = rows.reshape(0, config.trigger_model.m)
    if rows.ndim != 2 or rows.shape[0] != n_objects:
        raise AlignmentError(detections.image_id, n_objects, rows.shape[0] if rows.ndim else 0)
    if n_objects == 0:
        return PoisonResult(detections)

    fires = trigger_flags(config.trigger_model, rows)
    objects = list(detections.objects)
    flags, rejected = [], []
    for j, obj in enumerate(objects):
        if not fires[j]:
            flags.append(False)
            continue
        try:
            bbox = poison_bb(obj.bbox, config.policy, detections.width, detections.height)
        except OverflowRejected:
            logger.debug("image %s object %d: poisoned box overflows, left as is", detections.image_id, j)
            rejected.append(j)
            flags.append(False)
            continue
        objects[j] = replace(obj, bbox=bbox)
        flags.append(True)
    return PoisonResult(detections.with_objects(objects), tuple(flags), tuple(rejected))
