"""
Numerical utilities shared by trigger selection, verification and the simulator:
exact pairwise distances, AUROC over score populations and histogram tables.
"""
from typing import Dict, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from sklearn.metrics import roc_auc_score

from .errors import EmptyInputError

# rows per block when building large distance matrices
DISTANCE_BLOCK = 1024


def pairwise_distances(x: np.ndarray, y: np.ndarray = None) -> np.ndarray:
    """
    Exact Euclidean distances between the rows of x and y.

    Blocks are evaluated in row order, so the result does not depend on the
    block size.
    """
    x = np.asarray(x, dtype=np.float64)
    y = x if y is None else np.asarray(y, dtype=np.float64)
    out = np.empty((x.shape[0], y.shape[0]), dtype=np.float64)
    if x.shape[0] == 0 or y.shape[0] == 0:
        return out
    for start in range(0, x.shape[0], DISTANCE_BLOCK):
        stop = min(start + DISTANCE_BLOCK, x.shape[0])
        out[start:stop] = cdist(x[start:stop], y, metric="euclidean")
    return out


def min_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Distance from every point to its nearest center (inf if there are no centers)."""
    points = np.asarray(points, dtype=np.float64)
    if len(centers) == 0:
        return np.full(points.shape[0], np.inf)
    return pairwise_distances(points, centers).min(axis=1)


def auroc(scores_extracted: Sequence[float], scores_benign: Sequence[float]) -> float:
    """
    Probability that an extracted model outscores a benign one.

    Equivalent to the Mann-Whitney U statistic normalised by the number of
    (extracted, benign) pairs, ties counting one half.
    """
    pos = np.asarray(scores_extracted, dtype=np.float64)
    neg = np.asarray(scores_benign, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EmptyInputError(
            f"AUROC needs both populations (extracted={pos.size}, benign={neg.size})")
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    return float(roc_auc_score(labels, np.concatenate([pos, neg])))


def histogram_table(groups: Mapping[str, Sequence[float]], bins: int = 20) -> pd.DataFrame:
    """
    Bin every group on one shared set of edges.

    Returns one row per (group, bin) with the group's median repeated on each
    row. Empty groups are left out.
    """
    columns = ["group", "bin_left", "bin_right", "count", "median"]
    values: Dict[str, np.ndarray] = {
        name: np.asarray(v, dtype=np.float64) for name, v in groups.items() if len(v) > 0
    }
    if not values:
        raise EmptyInputError("histogram input is empty")

    pooled = np.concatenate(list(values.values()))
    lo, hi = float(pooled.min()), float(pooled.max())
    rows = []
    for name, v in values.items():
        median = float(np.median(v))
        if lo == hi:
            rows.append((name, lo, hi, int(v.size), median))
            continue
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
        for k in range(len(counts)):
            rows.append((name, float(edges[k]), float(edges[k + 1]), int(counts[k]), median))
    return pd.DataFrame(rows, columns=columns)
