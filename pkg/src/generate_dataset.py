"""Generate synthetic object worlds for the extraction-attack simulator.

A world holds three object sets (train, substitute, key pool). Each object has
a true box inside its image, a category, a feature row drawn from a Gaussian
mixture and a small RGB crop whose statistics follow its mixture component.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import check_keys
from .data_loader import save_detections, save_features
from .errors import ConfigError
from .features import FeatureMatrix, extract_features
from .geometry import BoundingBox, DetectedObject, ImageDetections

logger = logging.getLogger(__name__)

CROP_SIZE = 8
# seed-stream roles, kept stable so worlds stay reproducible
SET_ROLES = {"train": 1, "substitute": 2, "key": 3}
MIXTURE_ROLE = 0


@dataclass(frozen=True)
class MixtureComponent:
    mean: Tuple[float, ...]
    stdev: float
    weight: float

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(x) for x in self.mean))
        if self.stdev <= 0:
            raise ConfigError(f"component stdev must be positive, got {self.stdev}")
        if self.weight < 0:
            raise ConfigError(f"component weight must be non-negative, got {self.weight}")

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": list(self.mean), "stdev": self.stdev, "weight": self.weight}


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_train: int = 1500
    n_substitute: int = 1500
    n_key: int = 400
    key_pool: int = 0
    m: int = 6
    mixture: Tuple[MixtureComponent, ...] = ()
    n_components: int = 5
    compact_weight: float = 0.02
    compact_stdev: float = 0.05
    wide_stdev: float = 1.0
    key_compact_weight: float = 0.25
    image_w: float = 640.0
    image_h: float = 480.0
    objects_per_image: int = 4
    bb_scale: float = 0.15
    bb_sigma: float = 0.35
    n_categories: int = 3
    distribution_shift: float = 0.0
    shift_target: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "mixture", tuple(
            c if isinstance(c, MixtureComponent) else MixtureComponent(**c) for c in self.mixture))
        if self.shift_target is not None:
            object.__setattr__(self, "shift_target", tuple(float(x) for x in self.shift_target))
        for name in ("n_train", "n_substitute", "n_key"):
            if getattr(self, name) < 1:
                raise ConfigError(f"world: {name} must be positive")
        if self.key_pool and self.n_key > self.key_pool:
            raise ConfigError(f"world: n_key={self.n_key} exceeds the key pool of {self.key_pool} objects")
        if self.m < 1 or self.objects_per_image < 1 or self.n_categories < 1:
            raise ConfigError("world: m, objects_per_image and n_categories must be positive")
        if not 0.0 <= self.distribution_shift <= 1.0:
            raise ConfigError(f"world: distribution_shift must lie in [0, 1], got {self.distribution_shift}")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ConfigError("world: image size must be positive")
        if self.mixture:
            _check_mixture(self.mixture, self.m)
        elif not 0.0 < self.compact_stdev < self.wide_stdev:
            raise ConfigError("world: compact_stdev must be positive and below wide_stdev")
        k = len(self.mixture) or self.n_components
        if k < 2:
            raise ConfigError("world: the mixture needs at least two components")
        if self.shift_target is not None:
            if len(self.shift_target) != k:
                raise ConfigError(f"world: shift_target has {len(self.shift_target)} weights for {k} components")
            if abs(sum(self.shift_target) - 1.0) > 1e-9 or min(self.shift_target) < 0:
                raise ConfigError("world: shift_target must be a probability vector")

    @property
    def pool_size(self) -> int:
        return self.key_pool or 2 * self.n_key

    def to_dict(self) -> Dict[str, Any]:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        doc["mixture"] = [c.to_dict() for c in self.mixture]
        doc["shift_target"] = list(self.shift_target) if self.shift_target is not None else None
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "WorldSpec":
        check_keys(doc, cls.__dataclass_fields__, "world")
        kwargs = dict(doc)
        if "mixture" in kwargs:
            kwargs["mixture"] = tuple(MixtureComponent(**c) for c in kwargs["mixture"])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"world: {e}")


def _check_mixture(mixture: Sequence[MixtureComponent], m: int) -> None:
    if any(len(c.mean) != m for c in mixture):
        raise ConfigError(f"world: every component mean must have {m} entries")
    if abs(sum(c.weight for c in mixture) - 1.0) > 1e-9:
        raise ConfigError("world: mixture weights must sum to 1")
    stdevs = [c.stdev for c in mixture]
    if min(stdevs) >= max(stdevs):
        raise ConfigError("world: one component must be more compact than the others")


def default_mixture(spec: WorldSpec) -> Tuple[MixtureComponent, ...]:
    """Component 0 is the compact one; means are spread with a minimum separation."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, MIXTURE_ROLE]))
    k = spec.n_components
    min_sep = 5.0
    means: List[np.ndarray] = []
    for _ in range(1000 * k):
        candidate = rng.uniform(-6.0, 6.0, size=spec.m)
        if all(np.linalg.norm(candidate - other) >= min_sep for other in means):
            means.append(candidate)
        if len(means) == k:
            break
    while len(means) < k:
        means.append(rng.uniform(-6.0, 6.0, size=spec.m))
    wide = (1.0 - spec.compact_weight) / (k - 1)
    return tuple(
        MixtureComponent(tuple(mu), spec.compact_stdev if i == 0 else spec.wide_stdev,
                         spec.compact_weight if i == 0 else wide)
        for i, mu in enumerate(means)
    )


def quota_counts(weights: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder apportionment of n objects over the weights."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = w * n
    counts = np.floor(raw).astype(np.int64)
    remainder = n - int(counts.sum())
    if remainder:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


@dataclass(frozen=True)
class ObjectSet:
    """One object population laid out as images; rows follow (image, object) order."""
    name: str
    images: Tuple[ImageDetections, ...]
    features: FeatureMatrix
    components: np.ndarray
    crops: np.ndarray

    @property
    def n(self) -> int:
        return self.features.n

    def component_frequencies(self, k: int) -> np.ndarray:
        return np.bincount(self.components, minlength=k) / max(self.n, 1)

    def subset_images(self, image_ids: Sequence[str], name: Optional[str] = None) -> "ObjectSet":
        wanted = set(image_ids)
        rows = [i for i, key in enumerate(self.features.object_keys) if key[0] in wanted]
        return ObjectSet(name or self.name, tuple(d for d in self.images if d.image_id in wanted),
                         self.features.subset(rows), self.components[rows], self.crops[rows])

    def with_crop_features(self) -> "ObjectSet":
        """Same objects, with feature rows recomputed from the crops by the stat extractor."""
        return replace(self, features=extract_features(crops=self.crops, object_keys=self.features.object_keys))


@dataclass(frozen=True)
class SyntheticWorld:
    spec: WorldSpec
    mixture: Tuple[MixtureComponent, ...]
    train: ObjectSet
    substitute: ObjectSet
    key: ObjectSet
    compact: Tuple[int, ...] = field(default_factory=tuple)

    def with_crop_features(self) -> "SyntheticWorld":
        return replace(self, train=self.train.with_crop_features(),
                       substitute=self.substitute.with_crop_features(), key=self.key.with_crop_features())

    def summary(self) -> Dict[str, Any]:
        k = len(self.mixture)
        return {
            "seed": self.spec.seed,
            "components": k,
            "compact_components": list(self.compact),
            **{f"{s.name}_objects": s.n for s in (self.train, self.substitute, self.key)},
            **{f"{s.name}_frequencies": s.component_frequencies(k).round(6).tolist()
               for s in (self.train, self.substitute, self.key)},
        }


def _component_colors(mixture: Sequence[MixtureComponent], seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, MIXTURE_ROLE, 1]))
    return rng.uniform(40.0, 215.0, size=(len(mixture), 3))


def _draw_set(name: str, n: int, weights: Sequence[float], mixture: Sequence[MixtureComponent],
              colors: np.ndarray, spec: WorldSpec) -> ObjectSet:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SET_ROLES[name]]))
    counts = quota_counts(weights, n)
    components = rng.permutation(np.repeat(np.arange(len(mixture)), counts))

    means = np.asarray([c.mean for c in mixture])
    stdevs = np.asarray([c.stdev for c in mixture])
    rows = means[components] + stdevs[components, None] * rng.standard_normal((n, spec.m))

    # crop noise follows the component spread, relative to the widest component
    spread = 4.0 + 36.0 * stdevs / stdevs.max()
    noise = rng.standard_normal((n, CROP_SIZE, CROP_SIZE, 3)) * spread[components, None, None, None]
    crops = np.clip(colors[components, None, None, :] + noise, 0, 255).round().astype(np.uint8)

    side = min(spec.image_w, spec.image_h)
    w = np.exp(np.log(spec.bb_scale * side) + spec.bb_sigma * rng.standard_normal(n))
    h = w * np.exp(0.25 * rng.standard_normal(n))
    w = np.clip(w, 4.0, 0.6 * spec.image_w)
    h = np.clip(h, 4.0, 0.6 * spec.image_h)
    a = w / 2 + rng.random(n) * (spec.image_w - w)
    b = h / 2 + rng.random(n) * (spec.image_h - h)
    categories = rng.integers(0, spec.n_categories, size=n)

    images, keys = [], []
    per = spec.objects_per_image
    for start in range(0, n, per):
        image_id = f"{name}-{start // per:05d}"
        objects = []
        for j, i in enumerate(range(start, min(start + per, n))):
            objects.append(DetectedObject(int(categories[i]),
                                          BoundingBox(float(a[i]), float(b[i]), float(w[i]), float(h[i]))))
            keys.append((image_id, j))
        images.append(ImageDetections(image_id, spec.image_w, spec.image_h, tuple(objects)))
    return ObjectSet(name, tuple(images), FeatureMatrix(rows, tuple(keys)), components, crops)


def shifted_weights(weights: Sequence[float], compact: Sequence[int], shift: float,
                    target: Optional[Sequence[float]] = None) -> np.ndarray:
    """Move the substitute mixture toward `target` (default: no compact components)."""
    w = np.asarray(weights, dtype=np.float64)
    if target is None:
        target = w.copy()
        target[list(compact)] = 0.0
        target = target / target.sum()
    return (1.0 - shift) * w + shift * np.asarray(target, dtype=np.float64)


def generate_world(spec: WorldSpec) -> SyntheticWorld:
    """Deterministic for a given spec: every random stream derives from spec.seed."""
    mixture = spec.mixture or default_mixture(spec)
    _check_mixture(mixture, spec.m)
    stdevs = np.asarray([c.stdev for c in mixture])
    compact = tuple(int(i) for i in np.flatnonzero(stdevs == stdevs.min()))
    weights = np.asarray([c.weight for c in mixture])

    key_weights = weights.copy()
    if spec.key_compact_weight > 0:
        rest = np.ones(len(mixture), dtype=bool)
        rest[list(compact)] = False
        key_weights[list(compact)] = spec.key_compact_weight / len(compact)
        key_weights[rest] = (1.0 - spec.key_compact_weight) * weights[rest] / weights[rest].sum()

    colors = _component_colors(mixture, spec.seed)
    world = SyntheticWorld(
        spec=spec,
        mixture=mixture,
        train=_draw_set("train", spec.n_train, weights, mixture, colors, spec),
        substitute=_draw_set("substitute", spec.n_substitute,
                             shifted_weights(weights, compact, spec.distribution_shift, spec.shift_target),
                             mixture, colors, spec),
        key=_draw_set("key", spec.pool_size, key_weights, mixture, colors, spec),
        compact=compact,
    )
    logger.info("[OK] Generated world seed=%d: %d train, %d substitute, %d key-pool objects",
                spec.seed, world.train.n, world.substitute.n, world.key.n)
    return world


def save_world(world: SyntheticWorld, out_dir: str) -> Dict[str, str]:
    """Write each object set as ground-truth detections plus a feature CSV."""
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for objects in (world.train, world.substitute, world.key):
        det_path = os.path.join(out_dir, f"{objects.name}_truth.jsonl")
        feat_path = os.path.join(out_dir, f"{objects.name}_features.csv")
        save_detections(det_path, objects.images)
        save_features(feat_path, objects.features)
        pd.DataFrame({"image_id": [k[0] for k in objects.features.object_keys],
                      "object_index": [k[1] for k in objects.features.object_keys],
                      "component": objects.components}).to_csv(
            os.path.join(out_dir, f"{objects.name}_components.csv"), index=False)
        written[objects.name] = det_path
    return written


def with_seed(spec: WorldSpec, seed: int) -> WorldSpec:
    return replace(spec, seed=seed)
