"""
UMAP-based 2-D projection of object features.
Emits coordinates only (image_id, object_index, x, y, is_trigger); plotting is left to the reader.
"""
import logging
import os
from typing import Optional

import numpy as np
import pandas as pd

from .errors import EmptyInputError
from .features import FeatureMatrix
from .trigger import TriggerModel, trigger_flags

logger = logging.getLogger(__name__)


class FeatureProjector:
    def __init__(self, n_neighbors: int = 15, min_dist: float = 0.1, random_state: int = 42):
        """Initialize UMAP settings; the reducer is built per call since it depends on n."""
        self.n_neighbors = n_neighbors
        self.min_dist = min_dist
        self.random_state = random_state

    def project(self, features: FeatureMatrix, trigger_model: Optional[TriggerModel] = None) -> pd.DataFrame:
        """
        Project feature rows to 2-D.

        Args:
            features: rows to project, keyed by (image_id, object_index)
            trigger_model: optional; marks rows inside the trigger region

        Returns:
            DataFrame with image_id, object_index, x, y, is_trigger
        """
        if features.n < 3:
            raise EmptyInputError(f"projection needs at least 3 rows, got {features.n}")
        # imported here: umap pulls in numba, which is slow to load
        import umap

        reducer = umap.UMAP(
            n_components=2,
            n_neighbors=min(self.n_neighbors, features.n - 1),
            min_dist=self.min_dist,
            metric="euclidean",
            random_state=self.random_state,
        )
        coords = reducer.fit_transform(features.rows)
        if trigger_model is not None:
            is_trigger = trigger_flags(trigger_model, features.rows)
        else:
            is_trigger = np.zeros(features.n, dtype=bool)
        return pd.DataFrame({
            "image_id": [k[0] for k in features.object_keys],
            "object_index": [k[1] for k in features.object_keys],
            "x": coords[:, 0].astype(np.float64),
            "y": coords[:, 1].astype(np.float64),
            "is_trigger": is_trigger.astype(int),
        })


def project_features(features: FeatureMatrix, trigger_model: Optional[TriggerModel] = None,
                     out_path: Optional[str] = None, random_state: int = 42) -> pd.DataFrame:
    table = FeatureProjector(random_state=random_state).project(features, trigger_model)
    if out_path:
        parent = os.path.dirname(out_path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        table.to_csv(out_path, index=False)
        logger.info("[OK] Wrote %d projected rows to %s", len(table), out_path)
    return table
