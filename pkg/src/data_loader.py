"""Readers and writers for detection records and feature matrices.

Detections travel as line-delimited JSON, one image per line:
    {"image_id", "width", "height", "objects": [{category, a, b, w, h, confidence?}]}
Feature matrices are CSV (image_id, object_index, f0..f{m-1}) or the
length-prefixed little-endian binary layout below.
"""
import errno
import json
import os
import struct
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from .errors import ConfigError, FeatureDimensionError
from .features import FeatureMatrix
from .geometry import ImageDetections

# Binary feature file:
#   magic b"BBWF", uint32 version, uint64 n, uint32 m,
#   n x (uint16 id length, utf-8 image_id, uint32 object_index),
#   n*m float64 row-major.
BINARY_MAGIC = b"BBWF"
BINARY_VERSION = 1


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def load_detection_records(path: str) -> List[Dict[str, Any]]:
    """Raw interchange records, extra keys (e.g. per-object features) preserved."""
    if not os.path.exists(path):
        raise FileNotFoundError(errno.ENOENT, "file not found", path)
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{line_no}: invalid JSON ({e})", path=path)
    return records


def load_detections(path: str) -> List[ImageDetections]:
    records = load_detection_records(path)
    try:
        return [ImageDetections.from_record(r) for r in records]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: malformed detection record ({e})", path=path)


def record_line(record: Dict[str, Any]) -> str:
    return json.dumps(record, separators=(",", ":"))


def save_detections(path: str, detections: Iterable[ImageDetections],
                    features: Optional[FeatureMatrix] = None) -> None:
    """Write detections; with `features`, each object also carries its feature row."""
    _ensure_parent(path)
    index = features.key_index() if features is not None else None
    with open(path, "w", encoding="utf-8") as f:
        for dets in detections:
            record = dets.to_record()
            if index is not None:
                for j, obj in enumerate(record["objects"]):
                    row = index.get((dets.image_id, j))
                    if row is not None:
                        obj["features"] = features.rows[row].tolist()
            f.write(record_line(record) + "\n")


def features_from_records(records: Iterable[Dict[str, Any]]) -> FeatureMatrix:
    """Collect per-object "features" arrays embedded in detection records."""
    rows, keys = [], []
    for record in records:
        for j, obj in enumerate(record.get("objects", [])):
            if "features" in obj:
                rows.append(obj["features"])
                keys.append((str(record["image_id"]), j))
    if not rows:
        raise FeatureDimensionError("detection records carry no per-object features")
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise FeatureDimensionError(f"embedded features have mixed dimensions {sorted(dims)}")
    return FeatureMatrix(np.asarray(rows, dtype=np.float64), tuple(keys))


def save_features(path: str, features: FeatureMatrix) -> None:
    _ensure_parent(path)
    if path.endswith(".bin"):
        _save_features_binary(path, features)
        return
    df = pd.DataFrame(features.rows, columns=[f"f{k}" for k in range(features.m)])
    df.insert(0, "object_index", [k[1] for k in features.object_keys])
    df.insert(0, "image_id", [k[0] for k in features.object_keys])
    df.to_csv(path, index=False)


def load_features(path: str) -> FeatureMatrix:
    if not os.path.exists(path):
        raise FileNotFoundError(errno.ENOENT, "file not found", path)
    if path.endswith(".bin"):
        return _load_features_binary(path)
    df = pd.read_csv(path, dtype={"image_id": str})
    if list(df.columns[:2]) != ["image_id", "object_index"]:
        raise ConfigError(f"{path}: expected image_id, object_index key columns", path=path)
    feature_cols = [c for c in df.columns[2:]]
    expected = [f"f{k}" for k in range(len(feature_cols))]
    if feature_cols != expected:
        raise FeatureDimensionError(f"{path}: feature columns must be f0..f{len(feature_cols) - 1}")
    keys = tuple(zip(df["image_id"].astype(str), df["object_index"].astype(int)))
    return FeatureMatrix(df[feature_cols].to_numpy(dtype=np.float64), keys)


def _save_features_binary(path: str, features: FeatureMatrix) -> None:
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<IQI", BINARY_VERSION, features.n, features.m))
        for image_id, object_index in features.object_keys:
            encoded = image_id.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", object_index))
        f.write(features.rows.astype("<f8").tobytes(order="C"))


def _load_features_binary(path: str) -> FeatureMatrix:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != BINARY_MAGIC:
        raise ConfigError(f"{path}: not a binary feature file", path=path)
    version, n, m = struct.unpack_from("<IQI", data, 4)
    if version != BINARY_VERSION:
        raise ConfigError(f"{path}: unsupported binary version {version}", path=path)
    offset = 4 + struct.calcsize("<IQI")
    keys = []
    try:
        for _ in range(n):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            image_id = data[offset:offset + length].decode("utf-8")
            offset += length
            (object_index,) = struct.unpack_from("<I", data, offset)
            offset += 4
            keys.append((image_id, object_index))
    except struct.error:
        raise FeatureDimensionError(f"{path}: key section ends after {len(keys)} of {n} keys")
    expected = n * m * 8
    if len(data) - offset != expected:
        raise FeatureDimensionError(f"{path}: expected {expected} bytes of rows, found {len(data) - offset}")
    rows = np.frombuffer(data, dtype="<f8", count=n * m, offset=offset).reshape(n, m)
    return FeatureMatrix(rows.astype(np.float64), tuple(keys))
