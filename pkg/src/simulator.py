"""
Behavioral extraction-attack simulator.

The target f, benign models and extracted surrogates are modeled by how they
answer on the key-set, not by training detectors: a benign model predicts the
true boxes with localisation noise; an extracted surrogate does the same and
additionally carries the backdoor it learned from poisoned API responses, at
an effective magnitude and inside the feature region it actually saw poisoned.
"""
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import (DEFAULT_ETA, DEFAULT_MAX_ITERATIONS, DEFAULT_MIN_PTS, DEFAULT_STEP,
                     DEFAULT_TOLERANCE, check_keys)
from .data_loader import save_detections
from .errors import BBWError, ConfigError, OverflowRejected
from .features import FeatureMatrix
from .generate_dataset import SET_ROLES, ObjectSet, SyntheticWorld, WorldSpec, generate_world, save_world
from .geometry import BoundingBox, Clamp, ImageDetections, PoisoningPolicy, poison_bb
from .ml_utils import histogram_table, min_distances, pairwise_distances
from .poisoner import BackendSpec, ProxyConfig, poison_response
from .trigger import (ClusterSearchParams, TriggerModel, random_trigger_select, save_trigger_model,
                      trigger_cluster_search, trigger_flags)
from .verification import (Metric, Population, Suspect, VerificationReport, check_metric,
                           pair_groups, pair_objects, response_vs_clean, verify)

logger = logging.getLogger(__name__)

# seed-stream roles (SET_ROLES covers the world itself)
TARGET_ROLE = 10
BENIGN_ROLE = 11
EXTRACTED_ROLE = 12
BASELINE_ROLE = 13
KEY_SELECT_ROLE = 14
RANDOM_TRIGGER_ROLE = 15

SWEEP_KEYS = ("delta", "p", "lambda", "alpha", "recall", "strategy")
SWEEP_COLUMNS = list(SWEEP_KEYS) + ["auroc", "mean_S_extracted", "mean_S_benign", "error"]


class SurrogateKind(str, Enum):
    TARGET = "target"
    BENIGN = "benign"
    EXTRACTED = "extracted"


class Strategy(str, Enum):
    COMPACT = "compact"
    RANDOM = "random"


class FeatureOrigin(str, Enum):
    """Where object feature rows come from: the mixture draw or the stat extractor over crops."""
    WORLD = "world"
    CROPS = "crops"


def _unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class SurrogateSpec:
    kind: SurrogateKind
    loc_noise: float = 0.03
    fidelity: float = 1.0
    trigger_response_rate: float = 0.95
    false_fire_rate: float = 0.0
    attenuation: float = 0.0
    region_scale: float = 1.5
    min_support: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", SurrogateKind(self.kind))
        if self.loc_noise < 0:
            raise ConfigError(f"loc_noise must be non-negative, got {self.loc_noise}")
        for name in ("fidelity", "trigger_response_rate", "false_fire_rate", "attenuation"):
            _unit(name, getattr(self, name))
        if self.region_scale <= 0:
            raise ConfigError(f"region_scale must be positive, got {self.region_scale}")
        if self.min_support < 0:
            raise ConfigError(f"min_support must be non-negative, got {self.min_support}")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "loc_noise": self.loc_noise, "fidelity": self.fidelity,
                "trigger_response_rate": self.trigger_response_rate,
                "false_fire_rate": self.false_fire_rate, "attenuation": self.attenuation,
                "region_scale": self.region_scale, "min_support": self.min_support}

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], kind: SurrogateKind) -> "SurrogateSpec":
        check_keys(doc, set(cls.__dataclass_fields__), f"{kind.value} surrogate")
        return cls(**dict(doc, kind=doc.get("kind", kind)))


def _rng(seed: int, role: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, role, index]))


def perturb(images: Sequence[ImageDetections], loc_noise: float,
            rng: np.random.Generator) -> Tuple[ImageDetections, ...]:
    """Centre offsets of loc_noise * size and log-normal size noise, drawn in object order."""
    n = sum(len(d.objects) for d in images)
    noise = rng.standard_normal((n, 4)) * loc_noise
    out, k = [], 0
    for dets in images:
        objects = []
        for obj in dets.objects:
            bb = obj.bbox
            da, db, dw, dh = noise[k]
            k += 1
            moved = BoundingBox(bb.a + da * bb.w, bb.b + db * bb.h, bb.w * math.exp(dw), bb.h * math.exp(dh))
            objects.append(replace(obj, bbox=moved))
        out.append(dets.with_objects(objects))
    return tuple(out)


def simulate_target(objects: ObjectSet, spec: SurrogateSpec, seed: int) -> Tuple[ImageDetections, ...]:
    """f's predictions on an object set; deterministic per (seed, object set, object)."""
    return perturb(objects.images, spec.loc_noise, _rng(seed, TARGET_ROLE, SET_ROLES[objects.name]))


def effective_magnitude(delta: float, adaptive_recall: float, fidelity: float, attenuation: float) -> float:
    """1 + (1 - recall) * lambda * (delta - 1) * (1 - alpha)"""
    return 1.0 + (1.0 - adaptive_recall) * fidelity * (delta - 1.0) * (1.0 - attenuation)


@dataclass(frozen=True)
class PoisonedResponses:
    """What the attacker collected: poisoned answers on the substitute set."""
    responses: Tuple[ImageDetections, ...]
    flags: np.ndarray
    features: FeatureMatrix
    policy: PoisoningPolicy
    epsilon_bar: float
    rejected: int = 0

    @property
    def n_poisoned(self) -> int:
        return int(self.flags.sum())

    @property
    def poisoned_fraction(self) -> float:
        return self.n_poisoned / max(len(self.flags), 1)

    def flags_by_image(self) -> Dict[str, Tuple[bool, ...]]:
        out, k = {}, 0
        for dets in self.responses:
            out[dets.image_id] = tuple(bool(x) for x in self.flags[k:k + len(dets.objects)])
            k += len(dets.objects)
        return out


def poison_substitute(predictions: Sequence[ImageDetections], features: FeatureMatrix,
                      trigger_model: TriggerModel, policy: PoisoningPolicy) -> PoisonedResponses:
    """Run every substitute query through the poisoner, as the proxy would."""
    config = ProxyConfig(policy, trigger_model, BackendSpec.parse("substitute"))
    responses, flags, rejected, k = [], [], 0, 0
    for dets in predictions:
        n = len(dets.objects)
        result = poison_response(dets, features.rows[k:k + n], config)
        k += n
        responses.append(result.detections)
        flags.extend(result.flags)
        rejected += len(result.rejected)
    return PoisonedResponses(tuple(responses), np.asarray(flags, dtype=bool), features, policy,
                             trigger_model.epsilon_bar, rejected)


@dataclass(frozen=True)
class ExtractedSurrogate:
    spec: SurrogateSpec
    learned: PoisoningPolicy
    region: np.ndarray
    radius: float
    n_poisoned: int
    n_survivors: int
    n_supported: int

    @property
    def degenerate(self) -> bool:
        """No surviving poisoned response had enough support, so no backdoor was learned."""
        return self.n_supported == 0

    @property
    def support(self) -> float:
        """Share of surviving poisoned responses that shaped the learned region."""
        return self.n_supported / self.n_survivors if self.n_survivors else 0.0

    def summary(self) -> Dict[str, Any]:
        return {"delta_w_eff": self.learned.delta_w, "delta_h_eff": self.learned.delta_h,
                "shift_sx_eff": self.learned.shift_sx, "shift_sy_eff": self.learned.shift_sy,
                "n_poisoned": self.n_poisoned, "n_survivors": self.n_survivors,
                "n_supported": self.n_supported, "support": self.support,
                "radius": self.radius, "degenerate": self.degenerate}

    def fires(self, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(rows.shape[0])
        if self.degenerate:
            return np.zeros(rows.shape[0], dtype=bool)
        dist = min_distances(rows, self.region)
        inside = dist < self.radius
        shell = ~inside & (dist < 2.0 * self.radius)
        return (inside & (u < self.spec.trigger_response_rate)) | (shell & (u < self.spec.false_fire_rate))

    def predict(self, truth: Sequence[ImageDetections], features: FeatureMatrix,
                rng: np.random.Generator) -> Tuple[ImageDetections, ...]:
        noisy = perturb(truth, self.spec.loc_noise, rng)
        fired = self.fires(features.rows, rng)
        out, k = [], 0
        for dets in noisy:
            objects = list(dets.objects)
            for j, obj in enumerate(objects):
                if fired[k + j] and not self.learned.is_identity:
                    try:
                        objects[j] = replace(obj, bbox=poison_bb(obj.bbox, self.learned, dets.width, dets.height))
                    except OverflowRejected:
                        pass
            k += len(objects)
            out.append(dets.with_objects(objects))
        return tuple(out)


def train_extracted(poisoned: PoisonedResponses, spec: SurrogateSpec, adaptive_recall: float,
                    rng: np.random.Generator) -> ExtractedSurrogate:
    """
    Fit a surrogate to poisoned responses. An adaptive attacker first drops
    each poisoned response with probability `adaptive_recall`. A survivor is
    learned only when at least `spec.min_support` other survivors lie within
    region_scale * epsilon_bar of it; the learned region is the union of
    balls of that radius around the learned survivors.
    """
    _unit("adaptive_recall", adaptive_recall)
    poisoned_rows = np.flatnonzero(poisoned.flags)
    kept = poisoned_rows[rng.random(poisoned_rows.size) >= adaptive_recall]
    policy = poisoned.policy
    scale = (1.0 - adaptive_recall) * spec.fidelity * (1.0 - spec.attenuation)
    learned = PoisoningPolicy(
        delta_w=effective_magnitude(policy.delta_w, adaptive_recall, spec.fidelity, spec.attenuation),
        delta_h=effective_magnitude(policy.delta_h, adaptive_recall, spec.fidelity, spec.attenuation),
        pattern=policy.pattern,
        shift_sx=scale * policy.shift_sx,
        shift_sy=scale * policy.shift_sy,
        clamp=Clamp.CLAMP_TO_IMAGE,
    )
    radius = spec.region_scale * poisoned.epsilon_bar
    survivors = poisoned.features.rows[kept]
    supported = supported_rows(survivors, radius, spec.min_support)
    if not supported.any():
        logger.debug("surrogate kept %d of %d poisoned responses, none supported; no backdoor learned",
                     kept.size, poisoned_rows.size)
    return ExtractedSurrogate(spec, learned, survivors[supported], radius, int(poisoned_rows.size),
                              int(kept.size), int(supported.sum()))


def supported_rows(rows: np.ndarray, radius: float, min_support: int) -> np.ndarray:
    """Rows with at least `min_support` other rows closer than `radius`."""
    if len(rows) == 0:
        return np.zeros(0, dtype=bool)
    neighbours = (pairwise_distances(rows) < radius).sum(axis=1) - 1
    return neighbours >= min_support


def prepare_key_set(pool: ObjectSet, flags: np.ndarray, n_key: int, trigger_fraction: float,
                    rng: np.random.Generator) -> List[str]:
    """
    Pick key-set images: images holding trigger objects first, until they
    make up `trigger_fraction` of n_key objects, then the other images.
    """
    _unit("key_trigger_fraction", trigger_fraction)
    if n_key > pool.n:
        raise ConfigError(f"n_key={n_key} exceeds the key pool of {pool.n} objects")
    trigger_images, other_images, sizes, k = [], [], {}, 0
    for dets in pool.images:
        n = len(dets.objects)
        sizes[dets.image_id] = n
        (trigger_images if flags[k:k + n].any() else other_images).append(dets.image_id)
        k += n
    trigger_images = [trigger_images[i] for i in rng.permutation(len(trigger_images))]
    other_images = [other_images[i] for i in rng.permutation(len(other_images))]
    if not trigger_images:
        logger.warning("[WARNING] key pool holds no trigger objects")

    chosen, total = [], 0
    for image_id in trigger_images:
        if total >= trigger_fraction * n_key:
            break
        chosen.append(image_id)
        total += sizes[image_id]
    for image_id in other_images + trigger_images:
        if total >= n_key:
            break
        if image_id not in chosen:
            chosen.append(image_id)
            total += sizes[image_id]
    return sorted(chosen)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    policy: PoisoningPolicy = field(default_factory=lambda: PoisoningPolicy(1.05, 1.05))
    p: float = 0.02
    n_benign: int = 30
    n_extracted: int = 30
    n_baseline: int = 0
    eta: float = DEFAULT_ETA
    metric: Metric = Metric.SCALE
    adaptive_recall: float = 0.0
    strategy: Strategy = Strategy.COMPACT
    feature_source: FeatureOrigin = FeatureOrigin.WORLD
    target: SurrogateSpec = field(default_factory=lambda: SurrogateSpec(SurrogateKind.TARGET, loc_noise=0.02))
    benign: SurrogateSpec = field(default_factory=lambda: SurrogateSpec(SurrogateKind.BENIGN))
    extracted: SurrogateSpec = field(default_factory=lambda: SurrogateSpec(SurrogateKind.EXTRACTED))
    tolerance: int = DEFAULT_TOLERANCE
    step: float = DEFAULT_STEP
    min_pts: int = DEFAULT_MIN_PTS
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    key_trigger_fraction: float = 0.5
    histogram_bins: int = 20
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "feature_source", FeatureOrigin(self.feature_source))
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"poisoning ratio must lie in (0, 1], got {self.p}")
        for name in ("n_benign", "n_extracted", "n_baseline"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        _unit("adaptive_recall", self.adaptive_recall)
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def seed(self) -> int:
        return self.world.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, world=replace(self.world, seed=seed))

    def to_dict(self) -> Dict[str, Any]:
        # workers is an execution setting and stays out of reports
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "workers"}
        doc["world"] = self.world.to_dict()
        doc["policy"] = self.policy.to_dict()
        doc["metric"] = self.metric.value
        doc["strategy"] = self.strategy.value
        doc["feature_source"] = self.feature_source.value
        for key in ("target", "benign", "extracted"):
            doc[key] = getattr(self, key).to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ExperimentConfig":
        check_keys(doc, set(cls.__dataclass_fields__) | {"seed"}, "experiment")
        kwargs = {k: v for k, v in doc.items() if k != "seed"}
        if "world" in kwargs:
            kwargs["world"] = WorldSpec.from_dict(kwargs["world"])
        if "policy" in kwargs:
            kwargs["policy"] = PoisoningPolicy.from_dict(kwargs["policy"])
        for key, kind in (("target", SurrogateKind.TARGET), ("benign", SurrogateKind.BENIGN),
                          ("extracted", SurrogateKind.EXTRACTED)):
            if key in kwargs:
                kwargs[key] = SurrogateSpec.from_dict(kwargs[key], kind)
        try:
            config = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"experiment: {e}")
        return config.with_seed(int(doc["seed"])) if "seed" in doc else config


def experiment_world(config: ExperimentConfig) -> SyntheticWorld:
    world = generate_world(config.world)
    return world.with_crop_features() if config.feature_source is FeatureOrigin.CROPS else world


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag domain errors with the experiment stage they came from."""
    try:
        yield
    except BBWError as e:
        e.details.setdefault("stage", name)
        raise


def select_trigger(world: SyntheticWorld, config: ExperimentConfig) -> TriggerModel:
    with stage("trigger-select"):
        if config.strategy is Strategy.COMPACT:
            params = ClusterSearchParams(config.p, config.tolerance, config.step,
                                         config.min_pts, config.max_iterations)
            return trigger_cluster_search(world.train.features, params)
        seed = int(np.random.SeedSequence([config.seed, RANDOM_TRIGGER_ROLE]).generate_state(1)[0])
        return random_trigger_select(world.train.features, world.substitute.features, config.p, seed)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    world: SyntheticWorld
    trigger_model: TriggerModel
    report: VerificationReport
    document: Dict[str, Any]
    tables: Dict[str, pd.DataFrame]
    detections: Dict[str, Tuple[ImageDetections, ...]]
    target_key_features: FeatureMatrix

    @property
    def auroc(self) -> Optional[float]:
        return self.report.auroc

    def write(self, out_dir: str) -> List[str]:
        """Write the report, tables and every intermediate artifact under out_dir."""
        os.makedirs(out_dir, exist_ok=True)
        written = []
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(self.document, indent=2, sort_keys=True) + "\n")
        written.append(path)
        for name, table in self.tables.items():
            path = os.path.join(out_dir, f"{name}.csv")
            table.to_csv(path, index=False)
            written.append(path)
        path = os.path.join(out_dir, "trigger_model.json")
        save_trigger_model(self.trigger_model, path)
        written.append(path)
        for name, dets in self.detections.items():
            path = os.path.join(out_dir, f"{name}.jsonl")
            features = self.target_key_features if name == "target_key" else None
            save_detections(path, dets, features)
            written.append(path)
        written.extend(save_world(self.world, os.path.join(out_dir, "world")).values())
        logger.info("[OK] Wrote %d experiment artifacts to %s", len(written), out_dir)
        return written


def _pick(images: Sequence[ImageDetections], ids: Sequence[str]) -> Tuple[ImageDetections, ...]:
    wanted = set(ids)
    return tuple(d for d in images if d.image_id in wanted)


def run_experiment(config: ExperimentConfig, world: Optional[SyntheticWorld] = None,
                   trigger_model: Optional[TriggerModel] = None) -> ExperimentResult:
    """
    Trigger selection on train features, poisoned target responses on the
    substitute set, surrogate populations answering on the key-set, then
    verification. `world` and `trigger_model` may be passed in when several
    experiments share them.
    """
    with stage("config"):
        check_metric(config.metric, config.policy)
    if world is None:
        with stage("world"):
            world = experiment_world(config)
    if trigger_model is None:
        trigger_model = select_trigger(world, config)
    seed = config.seed

    with stage("poison"):
        f_substitute = simulate_target(world.substitute, config.target, seed)
        poisoned = poison_substitute(f_substitute, world.substitute.features, trigger_model, config.policy)
        logger.info("[OK] Poisoned %d/%d substitute responses (%.2f%%)", poisoned.n_poisoned,
                    world.substitute.n, 100.0 * poisoned.poisoned_fraction)

    with stage("key-set"):
        pool_flags = trigger_flags(trigger_model, world.key.features.rows)
        key_ids = prepare_key_set(world.key, pool_flags, config.world.n_key,
                                  config.key_trigger_fraction, _rng(seed, KEY_SELECT_ROLE))
        key = world.key.subset_images(key_ids)
        f_key = _pick(simulate_target(world.key, config.target, seed), key_ids)
        key_flag_rows = trigger_flags(trigger_model, key.features.rows)
        flags, k = {}, 0
        for dets in f_key:
            flags[dets.image_id] = tuple(bool(x) for x in key_flag_rows[k:k + len(dets.objects)])
            k += len(dets.objects)

    unwatermarked = replace(poisoned, policy=PoisoningPolicy(1.0, 1.0, clamp=config.policy.clamp))
    plan = ([(Population.EXTRACTED, EXTRACTED_ROLE, i) for i in range(config.n_extracted)]
            + [(Population.BENIGN, BENIGN_ROLE, i) for i in range(config.n_benign)]
            + [(Population.BASELINE, BASELINE_ROLE, i) for i in range(config.n_baseline)])

    def build(item):
        population, role, index = item
        rng = _rng(seed, role, index)
        name = f"{population.value}-{index:02d}"
        if population is Population.BENIGN:
            return name, population, perturb(key.images, config.benign.loc_noise, rng), None
        source = poisoned if population is Population.EXTRACTED else unwatermarked
        surrogate = train_extracted(source, config.extracted, config.adaptive_recall, rng)
        return name, population, surrogate.predict(key.images, key.features, rng), surrogate

    with stage("surrogates"):
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                built = list(pool.map(build, plan))
        else:
            built = [build(item) for item in plan]

    suspects = [Suspect(name, population, dets) for name, population, dets, _ in built]
    with stage("verify"):
        report = verify(f_key, None, suspects, eta=config.eta, metric=config.metric,
                        policy=config.policy, flags=flags, workers=config.workers)

    surrogates = []
    for name, population, _, surrogate in built:
        row = {"name": name, "population": population.value}
        row.update(surrogate.summary() if surrogate is not None else
                   {"delta_w_eff": 1.0, "delta_h_eff": 1.0, "shift_sx_eff": 0.0, "shift_sy_eff": 0.0,
                    "n_poisoned": 0, "n_survivors": 0, "n_supported": 0, "support": 0.0,
                    "radius": 0.0, "degenerate": False})
        surrogates.append(row)
    degenerate = sum(1 for r in surrogates if r["degenerate"] and r["population"] == Population.EXTRACTED.value)
    if degenerate:
        logger.warning("[WARNING] %d extracted surrogates learned no backdoor", degenerate)

    with stage("histograms"):
        tables = {"pairing": report.pairing_table(), "surrogates": pd.DataFrame(surrogates)}
        area, d_values = {}, {}
        quantity = "d_scale" if config.metric is Metric.SCALE else "d_iou"
        for name, population, dets, _ in built:
            pairs = pair_objects(f_key, dets, flags, config.eta)
            for group, values in pair_groups(pairs, "area_ratio").items():
                area.setdefault(f"{population.value}/{group}", []).extend(values)
            for group, values in pair_groups(pairs, quantity, config.policy).items():
                d_values.setdefault(f"{population.value}/{group}", []).extend(values)
        if any(area.values()):
            tables["histogram_area_ratio"] = histogram_table(area, config.histogram_bins)
            tables[f"histogram_{quantity}"] = histogram_table(d_values, config.histogram_bins)
        clean = response_vs_clean(world.substitute.images, poisoned.responses, poisoned.flags_by_image())
        tables["response_vs_clean"] = histogram_table(clean, config.histogram_bins)

    document = {
        "config": config.to_dict(),
        "world": world.summary(),
        "trigger": {"provenance": trigger_model.provenance.value, "epsilon_bar": trigger_model.epsilon_bar,
                    "size": trigger_model.size, "converged": trigger_model.converged,
                    "search": trigger_model.search},
        "poisoning": {"substitute_objects": int(world.substitute.n), "poisoned_objects": poisoned.n_poisoned,
                      "poisoned_fraction": poisoned.poisoned_fraction, "rejected": int(poisoned.rejected)},
        "key_set": {"images": len(f_key), "objects": int(key.n),
                    "trigger_objects": int(key_flag_rows.sum())},
        "surrogates": surrogates,
        "verification": report.to_dict(),
    }
    detections = {"target_key": f_key, "substitute_responses": poisoned.responses}
    detections.update({f"suspects/{name}": dets for name, _, dets, _ in built})
    logger.info("[OK] Experiment seed=%d finished: AUROC=%s", seed,
                "n/a" if report.auroc is None else f"{report.auroc:.4f}")
    return ExperimentResult(config, world, trigger_model, report, document, tables, detections, key.features)


def cell_config(base: ExperimentConfig, cell: Mapping[str, Any]) -> ExperimentConfig:
    """Apply one sweep cell (delta, p, lambda, alpha, recall, strategy) to a base config."""
    check_keys(cell, SWEEP_KEYS, "sweep cell")
    config = base
    if "delta" in cell:
        config = replace(config, policy=replace(config.policy, delta_w=float(cell["delta"]),
                                                delta_h=float(cell["delta"])))
    if "p" in cell:
        config = replace(config, p=float(cell["p"]))
    if "lambda" in cell:
        config = replace(config, extracted=replace(config.extracted, fidelity=float(cell["lambda"])))
    if "alpha" in cell:
        config = replace(config, extracted=replace(config.extracted, attenuation=float(cell["alpha"])))
    if "recall" in cell:
        config = replace(config, adaptive_recall=float(cell["recall"]))
    if "strategy" in cell:
        config = replace(config, strategy=Strategy(cell["strategy"]))
    return config


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of the grid axes in SWEEP_KEYS order."""
    check_keys(grid, SWEEP_KEYS, "sweep grid")
    axes = [k for k in SWEEP_KEYS if k in grid]
    for key in axes:
        if not isinstance(grid[key], (list, tuple)) or not grid[key]:
            raise ConfigError(f"sweep grid: {key} must be a non-empty list")
    return [dict(zip(axes, values)) for values in product(*(grid[k] for k in axes))]


def _base_values(config: ExperimentConfig) -> Dict[str, Any]:
    return {"delta": config.policy.delta_w, "p": config.p, "lambda": config.extracted.fidelity,
            "alpha": config.extracted.attenuation, "recall": config.adaptive_recall,
            "strategy": config.strategy.value}


def sweep(base: ExperimentConfig, grid: Mapping[str, Sequence[Any]], workers: int = 1) -> pd.DataFrame:
    """
    One experiment per grid cell, all on the base seed's world. Trigger models
    are shared per (p, strategy). A failing cell is recorded in the error
    column and the sweep moves on.
    """
    cells = expand_grid(grid)
    world = experiment_world(base)
    configs, triggers = [], {}
    for cell in cells:
        try:
            config = cell_config(base, cell)
        except ValueError as e:
            configs.append((cell, None, e if isinstance(e, BBWError) else ConfigError(str(e))))
            continue
        key = (config.p, config.strategy)
        if key not in triggers:
            try:
                triggers[key] = select_trigger(world, config)
            except BBWError as e:
                triggers[key] = e
        configs.append((cell, config, None))

    def run(item):
        cell, config, error = item
        row = _base_values(base)
        row.update(cell)
        row.update({"auroc": None, "mean_S_extracted": None, "mean_S_benign": None, "error": ""})
        if error is None:
            model = triggers[(config.p, config.strategy)]
            error = model if isinstance(model, BBWError) else None
        if error is None:
            try:
                result = run_experiment(config, world=world, trigger_model=model)
                report = result.report
                row.update(auroc=report.auroc,
                           mean_S_extracted=report.mean_score(Population.EXTRACTED),
                           mean_S_benign=report.mean_score(Population.BENIGN))
            except BBWError as e:
                error = e
        if error is not None:
            logger.warning("[WARNING] sweep cell %s failed: %s", cell, error)
            row["error"] = f"{type(error).__name__}: {error.message}"
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, configs))
    else:
        rows = [run(item) for item in configs]
    logger.info("[OK] Sweep finished: %d cells, %d failed", len(rows), sum(1 for r in rows if r["error"]))
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
