"""
Synthetic base-model predictions for exercising the fusion and
evaluation pipeline without the CNNs.

Each model emits the true class with its configured accuracy and an
error class otherwise; the score vector is the softmax of a logit
``score_sharpness`` at the emitted class plus uniform jitter on every
class.  Jitter stays below the sharpness, so the argmax is always the
emitted class.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Optional

import numpy as np
from tqdm import tqdm

from .labels import CLASS_NAMES, N_CLASSES, ClassLabel, softmax
from .manifest import DatasetManifest
from .metrics import ConfusionMatrix
from .predictions import PredictionSet, ScoreKind, save_predictions
from .prng import Xoshiro256
from .pydantic_models import (
    BASE_MODELS,
    GpsFix,
    ModelName,
    Provenance,
    SampleRecord,
    Split,
    SyntheticSpec,
)

LOGGER = logging.getLogger("cattle-ensemble")

PLACEHOLDER_SOURCE = Provenance(
    farm_id="synthetic",
    gps=GpsFix(lat=0.0, lon=0.0),
    timestamp="1970-01-01T00:00:00Z",
    breed="unknown",
    age_months=0,
    vet_confirmed=False,
)


@dataclass
class SyntheticOutput:
    manifest: DatasetManifest
    predictions: dict[tuple[ModelName, Split], PredictionSet] = field(default_factory=dict)

    def save(self, out_dir: PathLike) -> list[Path]:
        """Write ``labels.json`` and one ``{model}_{split}.jsonl`` per stream."""
        out_dir = Path(out_dir)
        written = [out_dir / "labels.json"]
        self.manifest.save_json(written[0])
        for (model, split), pset in self.predictions.items():
            path = out_dir / f"{model.value}_{split.value}.jsonl"
            save_predictions(pset, path)
            written.append(path)
        return written


def _record(split: Split, index: int, label: ClassLabel) -> SampleRecord:
    sample_id = f"{split.value}-{index:05d}"
    return SampleRecord.model_validate(
        {
            "id": sample_id,
            "path": f"synthetic/{sample_id}.png",
            "class": label,
            "split": split,
            "synthetic": False,
            "sha256": hashlib.sha256(sample_id.encode("utf-8")).hexdigest(),
            "source": PLACEHOLDER_SOURCE,
        }
    )


def score_vector(emitted: int, rng: Xoshiro256, sharpness: float, jitter: float) -> np.ndarray:
    z = np.array([jitter * rng.random() for _ in range(N_CLASSES)])
    z[emitted] += sharpness
    return softmax(z)


def _partners(spec: SyntheticSpec) -> dict[int, int]:
    partners = {}
    for a, b in spec.confusion_bias:
        ia, ib = CLASS_NAMES.index(a), CLASS_NAMES.index(b)
        partners.setdefault(ia, ib)
        partners.setdefault(ib, ia)
    return partners


def emit_class(true: int, accuracy: float, partners: dict[int, int], rng: Xoshiro256) -> int:
    """Class a model with the given accuracy predicts for a sample."""
    if rng.random() < accuracy:
        return true
    if true in partners and rng.random() < 0.5:
        return partners[true]
    others = [k for k in range(N_CLASSES) if k != true]
    return others[rng.randbelow(len(others))]


def synthesize(spec: SyntheticSpec, seed: int) -> SyntheticOutput:
    """Labels for every configured split and three prediction streams each."""
    partners = _partners(spec)
    records = []
    predictions = {}
    for split in spec.splits:
        split_records = []
        for label in ClassLabel:
            for _ in range(spec.n_per_class.get(label.label, 0)):
                split_records.append(_record(split, len(split_records), label))
        records += split_records
        for model, accuracy in zip(BASE_MODELS, spec.model_accuracies):
            rng = Xoshiro256.substream(seed, f"synth/{model.value}/{split.value}")
            rows = []
            for record in tqdm(split_records, desc=f"{model.value} {split.value}", disable=None):
                emitted = emit_class(int(record.label), accuracy, partners, rng)
                rows.append(score_vector(emitted, rng, spec.score_sharpness, spec.score_jitter))
            predictions[model, split] = PredictionSet(
                model,
                ScoreKind.PROBS,
                tuple(r.id for r in split_records),
                np.array(rows, dtype=np.float64).reshape(-1, N_CLASSES),
            )
        LOGGER.info("Synthesized %d %s samples", len(split_records), split.value)
    return SyntheticOutput(DatasetManifest(records), predictions)


def replicate_confusion(
    cm: ConfusionMatrix,
    seed: int,
    spec: Optional[SyntheticSpec] = None,
) -> SyntheticOutput:
    """Predictions whose fused argmax realizes ``cm`` exactly.

    All three models emit the predicted class of each cell, so the
    ensemble decision does not depend on the weights or the
    temperature.  Every configured split receives the whole matrix.
    """
    spec = spec or SyntheticSpec()
    records = []
    predictions = {}
    for split in spec.splits:
        split_records = []
        emitted = []
        for true in range(N_CLASSES):
            for pred in range(N_CLASSES):
                for _ in range(int(cm.counts[true, pred])):
                    split_records.append(_record(split, len(split_records), ClassLabel(true)))
                    emitted.append(pred)
        records += split_records
        for model in BASE_MODELS:
            rng = Xoshiro256.substream(seed, f"replicate/{model.value}/{split.value}")
            rows = [score_vector(k, rng, spec.score_sharpness, spec.score_jitter) for k in emitted]
            predictions[model, split] = PredictionSet(
                model,
                ScoreKind.PROBS,
                tuple(r.id for r in split_records),
                np.array(rows, dtype=np.float64).reshape(-1, N_CLASSES),
            )
    LOGGER.info("Replicated a %d-sample confusion matrix", cm.total)
    return SyntheticOutput(DatasetManifest(records), predictions)
