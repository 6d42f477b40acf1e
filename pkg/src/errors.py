"""Domain errors for the BBW toolkit.

Every error can render itself as the machine-readable document the CLI prints
on stderr and the proxy returns in error responses.
"""
from typing import Any, Dict, Optional


class BBWError(Exception):
    """Base class for all domain failures (CLI exit code 1)."""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        doc = {"error": type(self).__name__, "message": self.message}
        for key, value in self.details.items():
            if value is not None:
                doc[key] = value
        return doc


class ConfigError(BBWError, ValueError):
    """Invalid or infeasible configuration document / parameters."""


class OverflowRejected(BBWError, ValueError):
    """A poisoned box leaves the image under the RejectOverflow policy."""

    def __init__(self, box, image_w: float, image_h: float):
        super().__init__(
            f"poisoned box {box} exceeds image {image_w}x{image_h}",
            box=list(box), image_w=image_w, image_h=image_h,
        )
        self.box = box


class FeatureDimensionError(BBWError, ValueError):
    def __init__(self, message: str, expected: Optional[int] = None, got: Optional[int] = None):
        super().__init__(message, expected=expected, got=got)
        self.expected = expected
        self.got = got


class EmptyInputError(BBWError, ValueError):
    pass


class AlignmentError(BBWError, ValueError):
    """Per-object features do not line up with the detections."""

    def __init__(self, image_id: str, n_objects: int, n_features: int):
        super().__init__(
            f"image {image_id}: {n_features} feature vectors for {n_objects} objects",
            image_id=image_id, n_objects=n_objects, n_features=n_features,
        )


class DegenerateMetricError(BBWError, ValueError):
    pass


class InsufficientPairsError(BBWError):
    """V or V^c is empty, so the suspiciousness ratio is undefined."""

    def __init__(self, side: str, n_trigger: int, n_nontrigger: int):
        super().__init__(
            f"no {side} pairs (|V|={n_trigger}, |V^c|={n_nontrigger})",
            side=side, n_trigger=n_trigger, n_nontrigger=n_nontrigger,
        )
        self.side = side


class ZeroDenominatorError(BBWError):
    pass


class UnknownImageError(BBWError, KeyError):
    def __init__(self, image_id: str):
        super().__init__(f"unknown image_id {image_id!r}", image_id=image_id)
        self.image_id = image_id

    def __str__(self) -> str:
        return self.message


class BackendUnavailable(BBWError):
    pass
