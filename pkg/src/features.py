"""Object feature matrices and the built-in stat extractor.

The extractor interface E: O -> R^m takes either cropped pixel blocks or rows
that some external extractor already produced.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyInputError, FeatureDimensionError

ObjectKey = Tuple[str, int]

HIST_BINS = 4
STAT_FEATURE_DIM = 3 + 3 + 1 + 1 + HIST_BINS


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows of Z aligned with (image_id, object_index) keys."""
    rows: np.ndarray
    object_keys: Tuple[ObjectKey, ...]

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise FeatureDimensionError(f"feature rows must be 2-D, got shape {rows.shape}")
        if rows.shape[1] < 1:
            raise FeatureDimensionError("feature dimension must be at least 1", got=rows.shape[1])
        if not np.all(np.isfinite(rows)):
            bad = int(np.flatnonzero(~np.isfinite(rows).all(axis=1))[0])
            raise FeatureDimensionError(f"row {bad} contains non-finite values")
        keys = tuple((str(k[0]), int(k[1])) for k in self.object_keys)
        if len(keys) != rows.shape[0]:
            raise FeatureDimensionError(
                f"{len(keys)} object keys for {rows.shape[0]} rows",
                expected=rows.shape[0], got=len(keys))
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "object_keys", keys)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def m(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, indices: Sequence[int]) -> "FeatureMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureMatrix(self.rows[idx], tuple(self.object_keys[i] for i in idx))

    def key_index(self) -> Dict[ObjectKey, int]:
        return {key: i for i, key in enumerate(self.object_keys)}

    def rows_for_image(self, image_id: str, n_objects: int) -> np.ndarray:
        """Feature rows of one image ordered by object index."""
        index = self.key_index()
        try:
            return self.rows[[index[(image_id, j)] for j in range(n_objects)]]
        except KeyError as e:
            raise FeatureDimensionError(f"no feature row for object {e.args[0]}")

    @classmethod
    def empty(cls, m: int) -> "FeatureMatrix":
        return cls(np.zeros((0, m)), ())


def stat_features(crop) -> np.ndarray:
    """Channel means/variances, aspect ratio, log-area and intensity histogram of a crop."""
    block = np.asarray(crop, dtype=np.float64)
    if block.ndim == 2:
        block = block[:, :, None]
    if block.ndim != 3 or block.shape[0] < 1 or block.shape[1] < 1:
        raise EmptyInputError(f"crop must be a non-empty HxW[xC] block, got shape {block.shape}")
    if block.shape[2] == 1:
        block = np.repeat(block, 3, axis=2)
    elif block.shape[2] != 3:
        raise FeatureDimensionError(f"crop must have 1 or 3 channels, got {block.shape[2]}")

    height, width = block.shape[:2]
    pixels = block.reshape(-1, 3)
    gray = pixels.mean(axis=1)
    hist, _ = np.histogram(gray, bins=HIST_BINS, range=(0.0, 256.0))
    return np.concatenate([
        pixels.mean(axis=0),
        pixels.var(axis=0),
        [width / height, np.log(width * height)],
        hist / gray.size,
    ])


def extract_features(crops=None, rows=None, object_keys: Optional[Sequence[ObjectKey]] = None) -> FeatureMatrix:
    """Build a FeatureMatrix from crops (stat extractor) or precomputed rows."""
    if (crops is None) == (rows is None):
        raise ValueError("pass exactly one of crops or rows")
    if crops is not None:
        vectors = [stat_features(c) for c in crops]
        matrix = np.vstack(vectors) if vectors else np.zeros((0, STAT_FEATURE_DIM))
    else:
        rows = [np.asarray(r, dtype=np.float64).ravel() for r in rows]
        dims = sorted({len(r) for r in rows})
        if len(dims) > 1:
            raise FeatureDimensionError(f"precomputed rows have mixed dimensions {dims}")
        if not rows:
            raise EmptyInputError("no precomputed rows given")
        matrix = np.vstack(rows)
    if object_keys is None:
        object_keys = [("", i) for i in range(matrix.shape[0])]
    return FeatureMatrix(matrix, tuple(object_keys))
