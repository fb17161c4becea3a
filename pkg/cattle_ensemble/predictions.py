"""
Per-model prediction files: the point where base-model outputs enter
the pipeline.

Two formats are accepted, chosen by suffix:

- JSON Lines (``.jsonl``): a header line
  ``{"model": "vgg16", "kind": "logits"}`` followed by one
  ``{"id": ..., "scores": [6 numbers]}`` per sample.
- CSV (``.csv``): a comment line ``# model=vgg16,kind=logits`` then
  columns ``id,s1,...,s6``.
"""

import csv
import io
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from os import PathLike
from pathlib import Path
from typing import Optional

import numpy as np

from .export import write_atomic
from .labels import (
    N_CLASSES,
    as_logit_matrix,
    as_prob_matrix,
    softmax,
)
from .manifest import DatasetManifest
from .pydantic_models import ModelName, Split

LOGGER = logging.getLogger("cattle-ensemble")


class ScoreKind(str, Enum):
    LOGITS = "logits"
    PROBS = "probs"


class PredictionError(ValueError):
    """A prediction file failed validation."""

    def __init__(
        self,
        message: str,
        path: Optional[PathLike] = None,
        line: Optional[int] = None,
        record_id: Optional[str] = None,
    ):
        self.path = path
        self.line = line
        self.record_id = record_id
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append("line %d" % line)
        if record_id is not None:
            where.append("id %s" % record_id)
        super().__init__("%s: %s" % (":".join(where), message) if where else message)


@dataclass(frozen=True)
class PredictionSet:
    """Scores of one model, one row per sample id."""

    model: ModelName
    kind: ScoreKind
    ids: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        if self.scores.shape != (len(self.ids), N_CLASSES):
            raise PredictionError(
                "expected %d x %d scores, got %s"
                % (len(self.ids), N_CLASSES, self.scores.shape)
            )
        if len(set(self.ids)) != len(self.ids):
            raise PredictionError("duplicate ids in %s predictions" % self.model.value)
        self.scores.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def rows(self) -> dict[str, np.ndarray]:
        return dict(zip(self.ids, self.scores))

    def probs(self) -> np.ndarray:
        """Scores as probabilities (logits are softmaxed)."""
        if self.kind == ScoreKind.LOGITS:
            return softmax(self.scores)
        return self.scores

    def reindex(self, ids: tuple[str, ...]) -> "PredictionSet":
        """Same predictions, rows reordered to ``ids``."""
        if ids == self.ids:
            return self
        position = {i: n for n, i in enumerate(self.ids)}
        order = np.array([position[i] for i in ids], dtype=np.int64)
        return PredictionSet(self.model, self.kind, tuple(ids), self.scores[order].copy())


def check_same_ids(expected, actual, what: str = "predictions") -> None:
    """Raise if two id collections differ, listing the symmetric difference."""
    expected = set(expected)
    actual = set(actual)
    if expected == actual:
        return
    only_expected = sorted(expected - actual)
    only_actual = sorted(actual - expected)
    raise PredictionError(
        "%s ids do not match: missing %s; unexpected %s"
        % (
            what,
            ", ".join(only_expected[:10]) or "none",
            ", ".join(only_actual[:10]) or "none",
        )
    )


def _validate_scores(kind: ScoreKind, scores, path, line, record_id) -> list[float]:
    if not isinstance(scores, list) or len(scores) != N_CLASSES:
        n = len(scores) if isinstance(scores, list) else "non-list"
        raise PredictionError("expected %d scores, got %s" % (N_CLASSES, n), path, line, record_id)
    try:
        values = [float(s) for s in scores]
        if kind == ScoreKind.PROBS:
            as_prob_matrix([values])
        else:
            as_logit_matrix([values])
    except (TypeError, ValueError) as err:
        raise PredictionError(str(err), path, line, record_id) from None
    return values


def _parse_header(model: str, kind: str, path) -> tuple[ModelName, ScoreKind]:
    try:
        return ModelName(model), ScoreKind(kind)
    except ValueError:
        raise PredictionError("bad header model=%s kind=%s" % (model, kind), path, 1) from None


def _read_jsonl(path: Path):
    with open(path) as infh:
        lines = [line for line in infh]
    if not lines:
        raise PredictionError("empty file", path)
    try:
        header = json.loads(lines[0])
        model, kind = _parse_header(header.get("model"), header.get("kind"), path)
    except (json.JSONDecodeError, AttributeError):
        raise PredictionError("malformed header", path, 1) from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            record_id = str(row["id"])
            scores = row["scores"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise PredictionError("malformed row", path, lineno) from None
        rows.append((lineno, record_id, scores))
    return model, kind, rows


def _is_column_header(fields: list[str]) -> bool:
    """Whether a row is the ``id,s1,...,s6`` column line rather than a sample."""
    if fields[0] != "id":
        return False
    for cell in fields[1:]:
        try:
            float(cell)
        except ValueError:
            return True
    return False


def _read_csv(path: Path):
    with open(path, newline="") as infh:
        first = infh.readline()
        m = re.match(r"#\s*model=(\w+)\s*,\s*kind=(\w+)", first)
        if m is None:
            raise PredictionError("missing '# model=...,kind=...' header", path, 1)
        model, kind = _parse_header(m.group(1), m.group(2), path)
        reader = csv.reader(infh)
        rows = []
        header_seen = False
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if not header_seen:
                header_seen = True
                if _is_column_header(fields):
                    continue
            rows.append((lineno, fields[0], fields[1:]))
    return model, kind, rows


def load_predictions(path: PathLike, manifest: DatasetManifest, split: Split) -> PredictionSet:
    """Load one model's predictions for every sample of a split."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        model, kind, rows = _read_csv(path)
    else:
        model, kind, rows = _read_jsonl(path)
    wanted = {s.id for s in manifest.split(split)}
    seen: dict[str, int] = {}
    ids = []
    matrix = []
    for lineno, record_id, scores in rows:
        if record_id not in wanted:
            raise PredictionError("not in the %s split" % Split(split).value, path, lineno, record_id)
        if record_id in seen:
            raise PredictionError("duplicate id (first on line %d)" % seen[record_id], path, lineno, record_id)
        seen[record_id] = lineno
        ids.append(record_id)
        matrix.append(_validate_scores(kind, scores, path, lineno, record_id))
    missing = wanted - seen.keys()
    if missing:
        raise PredictionError(
            "%d ids of the %s split have no prediction, e.g. %s"
            % (len(missing), Split(split).value, ", ".join(sorted(missing)[:5])),
            path,
        )
    if kind == ScoreKind.PROBS:
        scores = np.array(as_prob_matrix(np.array(matrix).reshape(-1, N_CLASSES)))
    else:
        scores = np.array(matrix, dtype=np.float64).reshape(-1, N_CLASSES)
    LOGGER.info("Loaded %d %s %s from %s", len(ids), model.value, kind.value, path)
    return PredictionSet(model, kind, tuple(ids), scores)


def save_predictions(pset: PredictionSet, path: PathLike) -> None:
    """Write a prediction set in the format implied by the suffix."""
    path = Path(path)
    buf = io.StringIO()
    if path.suffix.lower() == ".csv":
        buf.write("# model=%s,kind=%s\n" % (pset.model.value, pset.kind.value))
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id"] + ["s%d" % (i + 1) for i in range(N_CLASSES)])
        for record_id, row in zip(pset.ids, pset.scores):
            writer.writerow([record_id] + [repr(float(x)) for x in row])
    else:
        buf.write(json.dumps({"model": pset.model.value, "kind": pset.kind.value}) + "\n")
        for record_id, row in zip(pset.ids, pset.scores):
            buf.write(json.dumps({"id": record_id, "scores": [float(x) for x in row]}) + "\n")
    write_atomic(buf.getvalue(), path)
