"""Deterministic DBSCAN over object feature rows"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .features import FeatureMatrix
from .ml_utils import pairwise_distances

logger = logging.getLogger(__name__)

NOISE = -1


@dataclass(frozen=True)
class Clustering:
    """Cluster labels per row; ids are ordered by each cluster's first core row."""
    labels: np.ndarray
    core_mask: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    @property
    def clusters(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.n_clusters)]

    @property
    def noise(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NOISE)

    def largest(self) -> Optional[np.ndarray]:
        """Members of the cluster with the most rows (ties: lowest first row index)."""
        best: Optional[Tuple[int, int, np.ndarray]] = None
        for members in self.clusters:
            key = (-members.size, int(members[0]))
            if best is None or key < best[:2]:
                best = (key[0], key[1], members)
        return None if best is None else best[2]


def _rows(z) -> np.ndarray:
    return z.rows if isinstance(z, FeatureMatrix) else np.asarray(z, dtype=np.float64)


def dbscan(z, epsilon: float, min_pts: int, distances: Optional[np.ndarray] = None) -> Clustering:
    """
    Density-based clustering with a deterministic border rule.

    Neighborhoods are closed balls (distance <= epsilon) that include the point
    itself. Core points connected through core neighborhoods share a cluster; a
    border point joins the lowest-id cluster among its core neighbours; the
    rest is noise. `distances` lets callers reuse one distance matrix across
    several epsilons.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be at least 1, got {min_pts}")
    if distances is None:
        distances = pairwise_distances(_rows(z))
    n = distances.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return Clustering(labels, np.zeros(0, dtype=bool))

    adjacency = distances <= epsilon
    core = adjacency.sum(axis=1) >= min_pts
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return Clustering(labels, core)

    core_graph = csr_matrix(adjacency[np.ix_(core_idx, core_idx)])
    _, components = connected_components(core_graph, directed=False)
    # renumber components by their first (lowest-index) core row
    _, first_seen = np.unique(components, return_index=True)
    order = np.argsort(first_seen, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    core_labels = rank[components]
    labels[core_idx] = core_labels

    border_idx = np.flatnonzero(~core)
    if border_idx.size:
        reach = adjacency[np.ix_(border_idx, core_idx)]
        candidate = np.where(reach, core_labels[None, :], np.iinfo(np.int64).max)
        best = candidate.min(axis=1)
        attached = best != np.iinfo(np.int64).max
        labels[border_idx[attached]] = best[attached]

    logger.debug("dbscan eps=%.6g min_pts=%d -> %d clusters, %d noise",
                 epsilon, min_pts, int(core_labels.max()) + 1, int((labels == NOISE).sum()))
    return Clustering(labels, core)
