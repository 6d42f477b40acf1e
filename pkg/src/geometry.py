"""Bounding-box data model, IoU and the BB poisoning transforms.

Boxes use the center-size convention (a, b, w, h) in continuous pixel units;
the corner form (x1, y1, x2, y2) is a derived view.
"""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError, OverflowRejected


@dataclass(frozen=True)
class BoundingBox:
    a: float
    b: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("a", "b", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"BoundingBox.{name} must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BoundingBox needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> Tuple[float, float, float, float]:
        return (self.a - self.w / 2.0, self.b - self.h / 2.0,
                self.a + self.w / 2.0, self.b + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains(self, other: "BoundingBox", tol: float = 1e-9) -> bool:
        x1, y1, x2, y2 = self.corners()
        u1, v1, u2, v2 = other.corners()
        return x1 <= u1 + tol and y1 <= v1 + tol and x2 >= u2 - tol and y2 >= v2 - tol

    def overlaps_image(self, image_w: float, image_h: float) -> bool:
        x1, y1, x2, y2 = self.corners()
        return min(x2, image_w) - max(x1, 0.0) > 0 and min(y2, image_h) - max(y1, 0.0) > 0

    def inside_image(self, image_w: float, image_h: float) -> bool:
        x1, y1, x2, y2 = self.corners()
        return x1 >= 0.0 and y1 >= 0.0 and x2 <= image_w and y2 <= image_h


@dataclass(frozen=True)
class DetectedObject:
    category: int
    bbox: BoundingBox
    confidence: Optional[float] = None

    def __post_init__(self):
        if int(self.category) != self.category or self.category < 0:
            raise ValueError(f"category must be a non-negative integer, got {self.category}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_record(self) -> Dict[str, Any]:
        record = {"category": int(self.category), "a": self.bbox.a, "b": self.bbox.b,
                  "w": self.bbox.w, "h": self.bbox.h}
        if self.confidence is not None:
            record["confidence"] = self.confidence
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "DetectedObject":
        confidence = record.get("confidence")
        return cls(
            category=int(record["category"]),
            bbox=BoundingBox(float(record["a"]), float(record["b"]),
                             float(record["w"]), float(record["h"])),
            confidence=None if confidence is None else float(confidence),
        )


@dataclass(frozen=True)
class ImageDetections:
    image_id: str
    width: float
    height: float
    objects: Tuple[DetectedObject, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: width and height must be positive")
        object.__setattr__(self, "objects", tuple(self.objects))
        for i, obj in enumerate(self.objects):
            if not obj.bbox.overlaps_image(self.width, self.height):
                raise ValueError(f"image {self.image_id}: object {i} lies outside the image")

    def with_objects(self, objects) -> "ImageDetections":
        return replace(self, objects=tuple(objects))

    def to_record(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "objects": [obj.to_record() for obj in self.objects],
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "ImageDetections":
        return cls(
            image_id=str(record["image_id"]),
            width=float(record["width"]),
            height=float(record["height"]),
            objects=tuple(DetectedObject.from_record(o) for o in record.get("objects", [])),
        )


class Pattern(str, Enum):
    RESCALE = "rescale"
    SHIFT = "shift"


class Clamp(str, Enum):
    CLAMP_TO_IMAGE = "clamp"
    REJECT_OVERFLOW = "reject"


@dataclass(frozen=True)
class PoisoningPolicy:
    delta_w: float = 1.1
    delta_h: float = 1.1
    pattern: Pattern = Pattern.RESCALE
    shift_sx: float = 0.0
    shift_sy: float = 0.0
    clamp: Clamp = Clamp.CLAMP_TO_IMAGE

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        object.__setattr__(self, "clamp", Clamp(self.clamp))
        if not (self.delta_w > 0 and self.delta_h > 0):
            raise ConfigError(f"poisoning magnitudes must be positive, got "
                              f"delta_w={self.delta_w}, delta_h={self.delta_h}")

    @property
    def is_identity(self) -> bool:
        if self.pattern is Pattern.RESCALE:
            return self.delta_w == 1.0 and self.delta_h == 1.0
        return self.shift_sx == 0.0 and self.shift_sy == 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"delta_w": self.delta_w, "delta_h": self.delta_h,
                "pattern": self.pattern.value, "shift_sx": self.shift_sx,
                "shift_sy": self.shift_sy, "clamp": self.clamp.value}

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "PoisoningPolicy":
        allowed = {"delta_w", "delta_h", "delta", "pattern", "shift_sx", "shift_sy", "clamp"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ConfigError(f"policy: unknown keys {unknown}")
        kwargs = dict(doc)
        if "delta" in kwargs:
            delta = float(kwargs.pop("delta"))
            kwargs.setdefault("delta_w", delta)
            kwargs.setdefault("delta_h", delta)
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise ConfigError(f"policy: {e}")


def iou(bb1: BoundingBox, bb2: BoundingBox) -> float:
    """Intersection over union of two boxes (0 when disjoint)."""
    ax1, ay1, ax2, ay2 = bb1.corners()
    bx1, by1, bx2, by2 = bb2.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = bb1.area + bb2.area - inter
    return min(1.0, inter / union)


def poison_bb(bb: BoundingBox, policy: PoisoningPolicy, image_w: float, image_h: float) -> BoundingBox:
    """Apply the poisoner to one trigger box and keep the result inside the image."""
    if policy.is_identity:
        return bb
    if policy.pattern is Pattern.RESCALE:
        poisoned = BoundingBox(bb.a, bb.b, policy.delta_w * bb.w, policy.delta_h * bb.h)
    else:
        poisoned = BoundingBox(bb.a + policy.shift_sx * bb.w, bb.b + policy.shift_sy * bb.h, bb.w, bb.h)

    if poisoned.inside_image(image_w, image_h):
        return poisoned
    if policy.clamp is Clamp.REJECT_OVERFLOW:
        raise OverflowRejected(poisoned.corners(), image_w, image_h)

    x1, y1, x2, y2 = poisoned.corners()
    x1, x2 = max(x1, 0.0), min(x2, image_w)
    y1, y2 = max(y1, 0.0), min(y2, image_h)
    if x2 <= x1 or y2 <= y1:
        # nothing of the poisoned box is left on the image
        raise OverflowRejected(poisoned.corners(), image_w, image_h)
    return BoundingBox.from_corners(x1, y1, x2, y2)
