"""
Shared helpers for building manifests, images and prediction sets.
"""

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cattle_ensemble.labels import ClassLabel
from cattle_ensemble.predictions import PredictionSet, ScoreKind
from cattle_ensemble.pydantic_models import ModelName

SOURCE = {
    "farm_id": "farm-7",
    "gps": {"lat": 9.03, "lon": 38.74},
    "timestamp": "2023-05-14T10:32:00Z",
    "breed": "Boran",
    "age_months": 30,
    "vet_confirmed": True,
}


def record(sample_id, label="fmd-foot", split="testing", synthetic=False, path=None, digest=None):
    return {
        "id": sample_id,
        "path": path or f"img/{sample_id}.png",
        "class": label,
        "split": split,
        "synthetic": synthetic,
        "sha256": digest or hashlib.sha256(sample_id.encode()).hexdigest(),
        "source": copy.deepcopy(SOURCE),
    }


def write_manifest(path: Path, records, **extra) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"samples": list(records), **extra}))
    return path


def one_hot_set(model: ModelName, ids, classes) -> PredictionSet:
    scores = np.zeros((len(ids), 6))
    scores[np.arange(len(ids)), [int(c) for c in classes]] = 1.0
    return PredictionSet(model, ScoreKind.PROBS, tuple(ids), scores)


@pytest.fixture
def published_counts():
    return np.array(
        [
            [381, 0, 7, 0, 0, 0],
            [0, 379, 4, 4, 0, 1],
            [5, 0, 383, 0, 0, 0],
            [0, 4, 0, 381, 3, 0],
            [0, 0, 0, 0, 246, 4],
            [0, 0, 0, 0, 5, 245],
        ]
    )


@pytest.fixture
def balanced_labels():
    """Two samples per class."""
    return {f"s{i:02d}": ClassLabel(i // 2) for i in range(12)}
