"""
Trigger selection: the compact trigger-cluster search, the random-cluster
baseline, the epsilon-ball trigger indicator and the trigger-model file.
"""
import errno
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np

from .clustering import dbscan
from .config import DEFAULT_MAX_ITERATIONS, DEFAULT_MIN_PTS, DEFAULT_STEP, DEFAULT_TOLERANCE
from .errors import ConfigError, EmptyInputError, FeatureDimensionError
from .features import FeatureMatrix
from .ml_utils import min_distances, pairwise_distances

logger = logging.getLogger(__name__)

MODEL_FORMAT = "bbw-trigger-model"
MODEL_VERSION = 1


class Provenance(str, Enum):
    COMPACT_SEARCH = "compact_search"
    RANDOM_BASELINE = "random_baseline"


@dataclass(frozen=True)
class ClusterSearchParams:
    poisoning_ratio: float
    tolerance: int = DEFAULT_TOLERANCE
    step: float = DEFAULT_STEP
    min_pts: int = DEFAULT_MIN_PTS
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def __post_init__(self):
        if not 0.0 < self.poisoning_ratio <= 1.0:
            raise ConfigError(f"poisoning ratio must lie in (0, 1], got {self.poisoning_ratio}")
        if self.tolerance < 1:
            raise ConfigError(f"search tolerance must be a positive integer, got {self.tolerance}")
        if self.step <= 0:
            raise ConfigError(f"search step must be positive, got {self.step}")
        if self.min_pts < 1 or self.max_iterations < 1:
            raise ConfigError("min_pts and max_iterations must be positive")


@dataclass(frozen=True)
class TriggerModel:
    """The trigger cluster (epsilon_bar, Z_bar); B is the union of its open balls."""
    epsilon_bar: float
    trigger_features: FeatureMatrix
    metric: str = "euclidean"
    provenance: Provenance = Provenance.COMPACT_SEARCH
    converged: bool = True
    search: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.epsilon_bar > 0:
            raise ConfigError(f"epsilon_bar must be positive, got {self.epsilon_bar}")
        if self.metric != "euclidean":
            raise ConfigError(f"unsupported metric {self.metric!r}")
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def m(self) -> int:
        return self.trigger_features.m

    @property
    def size(self) -> int:
        return self.trigger_features.n

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "epsilon_bar": self.epsilon_bar,
            "metric": self.metric,
            "m": self.m,
            "provenance": self.provenance.value,
            "converged": self.converged,
            "search": self.search,
            "object_keys": [list(k) for k in self.trigger_features.object_keys],
            "rows": self.trigger_features.rows.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "TriggerModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ConfigError(f"not a trigger model document (format={doc.get('format')!r})")
        m = int(doc["m"])
        rows = np.asarray(doc["rows"], dtype=np.float64).reshape(-1, m)
        features = FeatureMatrix(rows, tuple(tuple(k) for k in doc["object_keys"]))
        return cls(
            epsilon_bar=float(doc["epsilon_bar"]),
            trigger_features=features,
            metric=doc.get("metric", "euclidean"),
            provenance=doc.get("provenance", Provenance.COMPACT_SEARCH.value),
            converged=bool(doc.get("converged", True)),
            search=dict(doc.get("search", {})),
        )


def save_trigger_model(model: TriggerModel, path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model.to_dict(), f, indent=2)
    logger.info("[OK] Saved trigger model (%d rows, eps=%.6g) to %s", model.size, model.epsilon_bar, path)


def load_trigger_model(path: str) -> TriggerModel:
    if not os.path.exists(path):
        raise FileNotFoundError(errno.ENOENT, "file not found", path)
    with open(path, "r", encoding="utf-8") as f:
        return TriggerModel.from_dict(json.load(f))


def trigger_cluster_search(z: FeatureMatrix, params: ClusterSearchParams) -> TriggerModel:
    """
    Grow epsilon in steps of params.step until the largest DBSCAN cluster holds
    about n*p rows (|size - n*p| < t).

    The first probe is epsilon = step. If the window is never hit the probe
    with the smallest gap is returned with converged=False. The search stops
    early once the largest cluster overshoots n*p + t.
    """
    if z.n == 0:
        raise EmptyInputError("feature matrix is empty")
    target = z.n * params.poisoning_ratio
    if target < 1:
        raise ConfigError(f"n*p = {target:.3g} < 1: nothing to select")
    if params.tolerance >= target:
        raise ConfigError(f"tolerance {params.tolerance} must be below n*p = {target:.3g}")

    distances = pairwise_distances(z.rows)
    best: Optional[tuple] = None
    converged = False
    iteration = 0
    for iteration in range(1, params.max_iterations + 1):
        epsilon = iteration * params.step
        members = dbscan(None, epsilon, params.min_pts, distances=distances).largest()
        size = 0 if members is None else members.size
        gap = abs(size - target)
        if best is None or gap < best[0]:
            best = (gap, epsilon, members, size, iteration)
        if gap < params.tolerance:
            converged = True
            break
        if size - target >= params.tolerance or size == z.n:
            break

    gap, epsilon, members, size, found_at = best
    if not converged:
        logger.warning("[WARNING] Trigger cluster search did not converge after %d probes; "
                       "best cluster has %d rows for target %.1f", iteration, size, target)
    else:
        logger.info("[OK] Trigger cluster: %d rows at eps=%.6g (target %.1f)", size, epsilon, target)

    chosen = z.subset(members if members is not None else [])
    return TriggerModel(
        epsilon_bar=epsilon,
        trigger_features=chosen,
        provenance=Provenance.COMPACT_SEARCH,
        converged=converged,
        search={"target": target, "cluster_size": int(size), "iterations": iteration,
                "found_at": found_at, "tolerance": params.tolerance, "step": params.step,
                "min_pts": params.min_pts},
    )


def random_trigger_select(z_train: FeatureMatrix, z_substitute: FeatureMatrix, p: float,
                          seed: int, probes: int = 64) -> TriggerModel:
    """
    Random-cluster baseline: ceil(n*p) training rows drawn uniformly, with
    epsilon_bar bisected so that the ball union covers about n_sub*p
    substitute rows.
    """
    if z_substitute.n == 0:
        raise EmptyInputError("substitute feature matrix is empty")
    if z_train.n == 0:
        raise EmptyInputError("training feature matrix is empty")
    if z_train.m != z_substitute.m:
        raise FeatureDimensionError("training and substitute features differ in dimension",
                                    expected=z_train.m, got=z_substitute.m)
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"poisoning ratio must lie in (0, 1], got {p}")

    k = min(z_train.n, math.ceil(z_train.n * p))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(z_train.n, size=k, replace=False))
    centers = z_train.rows[chosen]

    distances = pairwise_distances(z_substitute.rows, centers)
    nearest = distances.min(axis=1)
    target = z_substitute.n * p

    lo, hi = 0.0, float(distances.max())
    if hi <= 0.0:
        hi = 1.0
    best = (abs(int((nearest < hi).sum()) - target), hi)
    for _ in range(probes):
        mid = (lo + hi) / 2.0
        if mid <= 0.0:
            break
        count = int((nearest < mid).sum())
        candidate = (abs(count - target), mid)
        if candidate < best:
            best = candidate
        if count < target:
            lo = mid
        else:
            hi = mid

    epsilon = best[1]
    covered = int((nearest < epsilon).sum())
    logger.info("[OK] Random trigger baseline: %d rows, eps=%.6g covers %d/%d substitute rows",
                k, epsilon, covered, z_substitute.n)
    return TriggerModel(
        epsilon_bar=epsilon,
        trigger_features=z_train.subset(chosen),
        provenance=Provenance.RANDOM_BASELINE,
        converged=True,
        search={"target": target, "covered": covered, "seed": seed},
    )


def trigger_flags(model: TriggerModel, rows) -> np.ndarray:
    """Vectorised trigger indicator over a block of feature rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1) if rows.size else rows.reshape(0, model.m)
    if rows.shape[0] and rows.shape[1] != model.m:
        raise FeatureDimensionError("feature dimension does not match the trigger model",
                                    expected=model.m, got=rows.shape[1])
    if model.size == 0 or rows.shape[0] == 0:
        return np.zeros(rows.shape[0], dtype=bool)
    return min_distances(rows, model.trigger_features.rows) < model.epsilon_bar


def trigger_indicator(model: TriggerModel, feature) -> int:
    """T(o): 1 if the feature lies strictly inside one of the epsilon_bar balls."""
    vector = np.asarray(feature, dtype=np.float64).ravel()
    if vector.size != model.m:
        raise FeatureDimensionError("feature dimension does not match the trigger model",
                                    expected=model.m, got=vector.size)
    return int(trigger_flags(model, vector.reshape(1, -1))[0])
