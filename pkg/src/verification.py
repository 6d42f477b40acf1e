"""
Ownership verification: pair the target's and a suspect's key-set detections,
score the suspect by its trigger/nontrigger inconsistency ratio and separate
model populations by AUROC.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import DEFAULT_ETA, ETA_GRID
from .errors import (AlignmentError, BBWError, ConfigError, DegenerateMetricError,
                     InsufficientPairsError, ZeroDenominatorError)
from .features import FeatureMatrix
from .geometry import DetectedObject, ImageDetections, Pattern, PoisoningPolicy, iou
from .ml_utils import auroc, histogram_table
from .trigger import TriggerModel, trigger_flags

logger = logging.getLogger(__name__)

TRIGGER = "trigger"
NONTRIGGER = "nontrigger"


class Metric(str, Enum):
    IOU = "iou"
    SCALE = "scale"


class Population(str, Enum):
    BENIGN = "benign"
    EXTRACTED = "extracted"
    # extracted from an unwatermarked API; reported, never scored into the AUROC
    BASELINE = "baseline"


@dataclass(frozen=True)
class PairedObject:
    image_id: str
    index_f: int
    index_g: int
    object_f: DetectedObject
    object_g: DetectedObject
    is_trigger: bool
    iou: float

    @property
    def area_ratio(self) -> float:
        return self.object_g.bbox.area / self.object_f.bbox.area

    @property
    def d_iou(self) -> float:
        return d_iou(self)

    def d_scale(self, delta_w: float, delta_h: float) -> float:
        return d_scale(self, delta_w, delta_h)


@dataclass(frozen=True)
class PairedObjectSet:
    pairs: Tuple[PairedObject, ...]
    eta: float
    skipped_images: Tuple[str, ...] = ()

    @property
    def trigger(self) -> Tuple[PairedObject, ...]:
        return tuple(p for p in self.pairs if p.is_trigger)

    @property
    def nontrigger(self) -> Tuple[PairedObject, ...]:
        return tuple(p for p in self.pairs if not p.is_trigger)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_trigger(self) -> int:
        return sum(1 for p in self.pairs if p.is_trigger)

    @property
    def n_nontrigger(self) -> int:
        return self.n_pairs - self.n_trigger


DetectionSet = Union[Mapping[str, ImageDetections], Sequence[ImageDetections]]


def _by_image(dets: DetectionSet) -> Dict[str, ImageDetections]:
    if isinstance(dets, Mapping):
        return dict(dets)
    return {d.image_id: d for d in dets}


def _match_image(f: ImageDetections, g: ImageDetections, flags: Sequence[bool], eta: float) -> List[PairedObject]:
    candidates = []
    for i, of in enumerate(f.objects):
        for j, og in enumerate(g.objects):
            if of.category != og.category:
                continue
            value = iou(of.bbox, og.bbox)
            if value > eta:
                candidates.append((-value, i, j))
    candidates.sort()
    used_f, used_g, pairs = set(), set(), []
    for neg_value, i, j in candidates:
        if i in used_f or j in used_g:
            continue
        used_f.add(i)
        used_g.add(j)
        pairs.append(PairedObject(f.image_id, i, j, f.objects[i], g.objects[j], bool(flags[i]), -neg_value))
    pairs.sort(key=lambda p: p.index_f)
    return pairs


def pair_objects(dets_f: DetectionSet, dets_g: DetectionSet,
                 trigger_flags_f: Mapping[str, Sequence[bool]], eta: float = DEFAULT_ETA) -> PairedObjectSet:
    """
    Greedy one-to-one matching per image: same-category candidates in
    descending IoU order, kept while IoU > eta. Images present on one side
    only are skipped and counted.
    """
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    f_index, g_index = _by_image(dets_f), _by_image(dets_g)
    skipped = sorted(set(f_index) ^ set(g_index))
    if skipped:
        logger.warning("[WARNING] %d key-set images missing on one side, skipped", len(skipped))

    pairs: List[PairedObject] = []
    for image_id in sorted(set(f_index) & set(g_index)):
        f = f_index[image_id]
        flags = trigger_flags_f.get(image_id)
        if flags is None or len(flags) != len(f.objects):
            raise AlignmentError(image_id, len(f.objects), 0 if flags is None else len(flags))
        pairs.extend(_match_image(f, g_index[image_id], flags, eta))
    return PairedObjectSet(tuple(pairs), eta, tuple(skipped))


def d_iou(pair: PairedObject) -> float:
    return 1.0 - iou(pair.object_f.bbox, pair.object_g.bbox)


def d_scale(pair: PairedObject, delta_w: float, delta_h: float) -> float:
    """(w_g/w_f)^sgn(delta_w-1) * (h_g/h_f)^sgn(delta_h-1)"""
    if delta_w == 1.0 and delta_h == 1.0:
        raise DegenerateMetricError("scale metric is constant at delta_w = delta_h = 1")
    bf, bg = pair.object_f.bbox, pair.object_g.bbox
    return float((bg.w / bf.w) ** np.sign(delta_w - 1.0) * (bg.h / bf.h) ** np.sign(delta_h - 1.0))


def check_metric(metric: Metric, policy: Optional[PoisoningPolicy]) -> None:
    """Reject metric/policy combinations that carry no signal."""
    if Metric(metric) is not Metric.SCALE:
        return
    if policy is None:
        raise ConfigError("the scale metric needs the poisoning policy magnitudes")
    if policy.pattern is Pattern.SHIFT:
        raise DegenerateMetricError("the scale metric is undefined for the shift pattern; use iou")
    if policy.delta_w == 1.0 and policy.delta_h == 1.0:
        raise DegenerateMetricError("scale metric is constant at delta_w = delta_h = 1")


def inconsistency(pair: PairedObject, metric: Metric, policy: Optional[PoisoningPolicy] = None) -> float:
    if Metric(metric) is Metric.IOU:
        return d_iou(pair)
    return d_scale(pair, policy.delta_w, policy.delta_h)


def suspiciousness_score(pairs: PairedObjectSet, metric: Metric = Metric.SCALE,
                         policy: Optional[PoisoningPolicy] = None) -> float:
    """Mean inconsistency on trigger pairs over mean inconsistency on nontrigger pairs."""
    check_metric(metric, policy)
    n_v, n_vc = pairs.n_trigger, pairs.n_nontrigger
    if n_v == 0:
        raise InsufficientPairsError(TRIGGER, n_v, n_vc)
    if n_vc == 0:
        raise InsufficientPairsError(NONTRIGGER, n_v, n_vc)
    v = np.mean([inconsistency(p, metric, policy) for p in pairs.trigger])
    vc = np.mean([inconsistency(p, metric, policy) for p in pairs.nontrigger])
    if vc == 0.0:
        raise ZeroDenominatorError("mean nontrigger inconsistency is zero", n_nontrigger=n_vc)
    return float(v / vc)


@dataclass(frozen=True)
class Suspect:
    name: str
    population: Population
    detections: DetectionSet

    def __post_init__(self):
        object.__setattr__(self, "population", Population(self.population))


@dataclass(frozen=True)
class SuspectResult:
    name: str
    population: Population
    score: Optional[float]
    n_pairs: int = 0
    n_trigger: int = 0
    n_nontrigger: int = 0
    skipped_images: int = 0
    error: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "population": self.population.value, "score": self.score,
                "n_pairs": self.n_pairs, "n_trigger": self.n_trigger,
                "n_nontrigger": self.n_nontrigger, "skipped_images": self.skipped_images,
                "error": self.error}


@dataclass(frozen=True)
class VerificationReport:
    metric: Metric
    eta: float
    suspects: Tuple[SuspectResult, ...]
    auroc: Optional[float] = None
    verifiable: Optional[bool] = None
    policy: Optional[Dict[str, Any]] = None
    notes: Tuple[str, ...] = field(default_factory=tuple)

    def scores(self, population: Population) -> List[float]:
        population = Population(population)
        return [s.score for s in self.suspects if s.population is population and s.score is not None]

    def mean_score(self, population: Population) -> Optional[float]:
        values = self.scores(population)
        return float(np.mean(values)) if values else None

    @property
    def errors(self) -> List[Dict[str, Any]]:
        return [dict(s.error, suspect=s.name) for s in self.suspects if s.error is not None]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric.value,
            "eta": self.eta,
            "policy": self.policy,
            "auroc": self.auroc,
            "verifiable": self.verifiable,
            "mean_S": {p.value: self.mean_score(p) for p in Population},
            "suspects": [s.to_dict() for s in self.suspects],
            "errors": self.errors,
            "notes": list(self.notes),
        }

    def pairing_table(self) -> pd.DataFrame:
        rows = [dict(s.to_dict(), error=s.error["message"] if s.error else "") for s in self.suspects]
        return pd.DataFrame(rows, columns=["name", "population", "score", "n_pairs", "n_trigger",
                                          "n_nontrigger", "skipped_images", "error"])


def key_set_flags(dets_f: DetectionSet, features_f: FeatureMatrix,
                  trigger_model: TriggerModel) -> Dict[str, Tuple[bool, ...]]:
    """Trigger flags of f's key-set predictions, from f's own object features."""
    flags = {}
    for image_id, dets in _by_image(dets_f).items():
        rows = features_f.rows_for_image(image_id, len(dets.objects))
        flags[image_id] = tuple(bool(x) for x in trigger_flags(trigger_model, rows))
    return flags


def _score_suspect(dets_f, flags, suspect: Suspect, eta, metric, policy) -> SuspectResult:
    try:
        pairs = pair_objects(dets_f, suspect.detections, flags, eta)
        counts = dict(n_pairs=pairs.n_pairs, n_trigger=pairs.n_trigger,
                      n_nontrigger=pairs.n_nontrigger, skipped_images=len(pairs.skipped_images))
    except BBWError as e:
        return SuspectResult(suspect.name, suspect.population, None, error=e.to_dict())
    try:
        score = suspiciousness_score(pairs, metric, policy)
    except BBWError as e:
        logger.warning("[WARNING] suspect %s not scored: %s", suspect.name, e)
        return SuspectResult(suspect.name, suspect.population, None, error=e.to_dict(), **counts)
    return SuspectResult(suspect.name, suspect.population, score, **counts)


def verify(dets_f: DetectionSet, features_f: Optional[FeatureMatrix], suspects: Sequence[Suspect],
           trigger_model: Optional[TriggerModel] = None, eta: float = DEFAULT_ETA,
           metric: Metric = Metric.SCALE, policy: Optional[PoisoningPolicy] = None,
           flags: Optional[Mapping[str, Sequence[bool]]] = None, workers: int = 1) -> VerificationReport:
    """
    Score every suspect against the target's key-set predictions.

    Trigger flags come from `flags` when given, otherwise from the trigger
    model applied to `features_f`. A suspect that cannot be paired or scored is
    reported with its error and left out of the AUROC.
    """
    metric = Metric(metric)
    check_metric(metric, policy)
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    dets_f = _by_image(dets_f)
    if flags is None:
        if trigger_model is None or features_f is None:
            raise ConfigError("verify needs trigger flags or a trigger model with f's key-set features")
        flags = key_set_flags(dets_f, features_f, trigger_model)

    def score(suspect):
        return _score_suspect(dets_f, flags, suspect, eta, metric, policy)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = tuple(pool.map(score, suspects))
    else:
        results = tuple(score(s) for s in suspects)

    ext = [r.score for r in results if r.population is Population.EXTRACTED and r.score is not None]
    ben = [r.score for r in results if r.population is Population.BENIGN and r.score is not None]
    value, verifiable, notes = None, None, []
    if ext and ben:
        value = auroc(ext, ben)
        verifiable = min(ext) > max(ben)
    else:
        notes.append(f"AUROC not computed: {len(ext)} extracted and {len(ben)} benign scores")
        logger.warning("[WARNING] %s", notes[-1])
    failed = sum(1 for r in results if r.error is not None)
    if failed:
        notes.append(f"{failed} suspects excluded after errors")
    logger.info("[OK] Verified %d suspects (metric=%s, eta=%.2f): AUROC=%s",
                len(results), metric.value, eta, "n/a" if value is None else f"{value:.4f}")
    return VerificationReport(metric, eta, results, value, verifiable,
                              policy.to_dict() if policy is not None else None, tuple(notes))


def eta_sensitivity(dets_f: DetectionSet, flags: Mapping[str, Sequence[bool]], suspects: Sequence[Suspect],
                    metric: Metric = Metric.SCALE, policy: Optional[PoisoningPolicy] = None,
                    etas: Sequence[float] = ETA_GRID) -> pd.DataFrame:
    """Re-run verification over a grid of pairing thresholds."""
    rows = []
    for eta in etas:
        report = verify(dets_f, None, suspects, eta=eta, metric=metric, policy=policy, flags=flags)
        scored = [s for s in report.suspects if s.error is None]
        rows.append({
            "eta": eta,
            "auroc": report.auroc,
            "mean_S_extracted": report.mean_score(Population.EXTRACTED),
            "mean_S_benign": report.mean_score(Population.BENIGN),
            "mean_pairs": float(np.mean([s.n_pairs for s in scored])) if scored else 0.0,
            "failed": len(report.suspects) - len(scored),
        })
    return pd.DataFrame(rows)


# Histograms
def pair_groups(pairs: Union[PairedObjectSet, Sequence[PairedObjectSet]], quantity: str = "area_ratio",
                policy: Optional[PoisoningPolicy] = None) -> Dict[str, List[float]]:
    """Per-pair quantity split into trigger / nontrigger groups."""
    sets = [pairs] if isinstance(pairs, PairedObjectSet) else list(pairs)
    if quantity == "area_ratio":
        value = lambda p: p.area_ratio
    elif quantity == "d_iou":
        value = lambda p: p.d_iou
    elif quantity == "d_scale":
        check_metric(Metric.SCALE, policy)
        value = lambda p: p.d_scale(policy.delta_w, policy.delta_h)
    else:
        raise ConfigError(f"unknown histogram quantity {quantity!r}")
    groups = {TRIGGER: [], NONTRIGGER: []}
    for s in sets:
        for p in s.pairs:
            groups[TRIGGER if p.is_trigger else NONTRIGGER].append(value(p))
    return groups


def response_vs_clean(clean: DetectionSet, responses: DetectionSet,
                      flags: Mapping[str, Sequence[bool]]) -> Dict[str, List[float]]:
    """d_iou between each API response box and the clean box of the same object."""
    clean, responses = _by_image(clean), _by_image(responses)
    groups = {TRIGGER: [], NONTRIGGER: []}
    for image_id in sorted(set(clean) & set(responses)):
        c, r = clean[image_id], responses[image_id]
        if len(c.objects) != len(r.objects):
            raise AlignmentError(image_id, len(c.objects), len(r.objects))
        for j, (oc, orr) in enumerate(zip(c.objects, r.objects)):
            group = TRIGGER if flags[image_id][j] else NONTRIGGER
            groups[group].append(1.0 - iou(oc.bbox, orr.bbox))
    return groups


def inconsistency_histogram(source, bins: int = 20, quantity: str = "area_ratio",
                            policy: Optional[PoisoningPolicy] = None) -> pd.DataFrame:
    """
    Binned counts and medians per group on shared edges. `source` is a
    PairedObjectSet (or several), or an already grouped mapping such as the
    output of response_vs_clean.
    """
    groups = source if isinstance(source, Mapping) else pair_groups(source, quantity, policy)
    return histogram_table(groups, bins=bins)
