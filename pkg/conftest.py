"""Shared fixtures for the BBW test-suite."""
import numpy as np
import pytest

from src.features import FeatureMatrix
from src.generate_dataset import WorldSpec
from src.geometry import BoundingBox, DetectedObject, ImageDetections
from src.simulator import ExperimentConfig
from src.trigger import ClusterSearchParams, trigger_cluster_search

BLOB_SIZE = 30


def blob_matrix(seed: int = 0, n: int = 1500, m: int = 6, blob: int = BLOB_SIZE,
                objects_per_image: int = 4) -> FeatureMatrix:
    """Four wide Gaussian components far from one tight blob of `blob` rows at the origin."""
    rng = np.random.default_rng(seed)
    centers = np.array([[6.0] * m, [-6.0] * m, [6.0, -6.0] * (m // 2), [-6.0, 6.0] * (m // 2)])
    wide = centers[rng.integers(0, len(centers), size=n - blob)] + rng.standard_normal((n - blob, m))
    tight = 0.05 * rng.standard_normal((blob, m))
    rows = np.vstack([wide, tight])[rng.permutation(n)]
    keys = [(f"img-{i // objects_per_image:04d}", i % objects_per_image) for i in range(n)]
    return FeatureMatrix(rows, tuple(keys))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_features():
    return blob_matrix()


@pytest.fixture(scope="session")
def blob_trigger(blob_features):
    return trigger_cluster_search(blob_features, ClusterSearchParams(poisoning_ratio=0.02))


@pytest.fixture
def make_image():
    def build(boxes, categories=None, image_id="img", width=100.0, height=100.0, confidences=None):
        categories = categories or [0] * len(boxes)
        confidences = confidences or [None] * len(boxes)
        objects = tuple(DetectedObject(c, BoundingBox(*bb), conf)
                        for bb, c, conf in zip(boxes, categories, confidences))
        return ImageDetections(image_id, width, height, objects)
    return build


@pytest.fixture
def small_experiment():
    """A world and populations small enough for multi-seed sweeps."""
    return ExperimentConfig(
        world=WorldSpec(seed=0, n_train=1000, n_substitute=1000, n_key=400),
        n_benign=10,
        n_extracted=10,
    )
