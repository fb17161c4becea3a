"""
Dataset manifest: loading, validation, split accounting and
digest-based deduplication.
"""

import json
import logging
from collections import Counter
from os import PathLike
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional

from pydantic import BaseModel, RootModel, ValidationError

from .export import write_json
from .labels import ClassLabel
from .pydantic_models import SampleRecord, Split

LOGGER = logging.getLogger("cattle-ensemble")

EXPECTED_COUNTS = Path(__file__).parent / "data" / "expected_counts.json"


class ManifestError(ValueError):
    """A manifest record failed validation."""

    def __init__(self, message: str, record_id: Optional[str] = None, field: Optional[str] = None):
        self.record_id = record_id
        self.field = field
        where = []
        if record_id is not None:
            where.append("record %s" % record_id)
        if field is not None:
            where.append("field %s" % field)
        super().__init__("%s: %s" % (", ".join(where), message) if where else message)


class CountKey(NamedTuple):
    """Cell of the composition table."""

    label: ClassLabel
    split: Split
    synthetic: bool

    def describe(self) -> str:
        kind = "synthetic" if self.synthetic else "real"
        return f"{self.label.label}/{self.split.value}/{kind}"


def tally(samples: Iterable[SampleRecord]) -> Counter:
    """Count samples per (class, split, synthetic) cell."""
    return Counter(CountKey(s.label, s.split, s.synthetic) for s in samples)


class DatasetManifest:
    """Validated, immutable list of sample records."""

    def __init__(self, samples: Iterable[SampleRecord] = ()):
        self.samples: tuple[SampleRecord, ...] = tuple(samples)
        seen_ids: set[str] = set()
        seen_paths: set[str] = set()
        for sample in self.samples:
            if sample.id in seen_ids:
                raise ManifestError("duplicate id", sample.id, "id")
            if sample.path in seen_paths:
                raise ManifestError("duplicate path %s" % sample.path, sample.id, "path")
            seen_ids.add(sample.id)
            seen_paths.add(sample.path)
        self.counts = tally(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def by_id(self) -> dict[str, SampleRecord]:
        return {s.id: s for s in self.samples}

    def split(self, split: Split) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == Split(split)]

    def save_json(self, filename: PathLike) -> None:
        """Save the manifest, with its counts, to a JSON file."""
        write_json(
            {
                "samples": [s.to_json_dict() for s in self.samples],
                "counts": [
                    {
                        "class": key.label.label,
                        "split": key.split.value,
                        "synthetic": key.synthetic,
                        "count": n,
                    }
                    for key, n in sorted(self.counts.items())
                ],
            },
            filename,
        )


def _parse_sample(raw: dict, index: int) -> SampleRecord:
    record_id = raw.get("id", "#%d" % index) if isinstance(raw, dict) else "#%d" % index
    try:
        sample = SampleRecord.model_validate(raw)
    except ValidationError as err:
        first = err.errors()[0]
        field = ".".join(str(x) for x in first["loc"]) or None
        raise ManifestError(first["msg"], str(record_id), field) from None
    if sample.model_extra:
        LOGGER.warning(
            "Ignoring unknown fields %s in record %s",
            ", ".join(sorted(sample.model_extra)),
            sample.id,
        )
        sample = SampleRecord.model_validate(
            {k: v for k, v in raw.items() if k not in sample.model_extra}
        )
    return sample


def load_manifest(path: PathLike) -> DatasetManifest:
    """Load and validate a manifest JSON file."""
    try:
        with open(path) as infh:
            data = json.load(infh)
    except json.JSONDecodeError as err:
        raise ManifestError("malformed JSON: %s" % err) from None
    if not isinstance(data, dict) or not isinstance(data.get("samples"), list):
        raise ManifestError("top level must be an object with a 'samples' list")
    manifest = DatasetManifest(
        _parse_sample(raw, idx) for idx, raw in enumerate(data["samples"])
    )
    if "counts" in data:
        stored: Counter = Counter()
        for cell in data["counts"]:
            try:
                key = CountKey(
                    ClassLabel.from_name(cell["class"]),
                    Split(cell["split"]),
                    bool(cell["synthetic"]),
                )
                stored[key] = int(cell["count"])
            except (KeyError, ValueError, TypeError) as err:
                raise ManifestError("bad counts cell %r (%s)" % (cell, err), field="counts")
        if +stored != +manifest.counts:
            raise ManifestError("stored counts do not match the samples", field="counts")
    LOGGER.info("Loaded %d samples from %s", len(manifest), path)
    return manifest


class ExpectedRow(BaseModel):
    """One class row of a dataset composition table."""

    training_real: int = 0
    training_synthetic: int = 0
    testing: int = 0
    validation: int = 0


ExpectedTable = RootModel[dict[str, ExpectedRow]]


def expected_counts(table: Mapping[str, ExpectedRow]) -> Counter:
    counts: Counter = Counter()
    for name, row in table.items():
        label = ClassLabel.from_name(name)
        counts[CountKey(label, Split.TRAINING, False)] = row.training_real
        counts[CountKey(label, Split.TRAINING, True)] = row.training_synthetic
        counts[CountKey(label, Split.TESTING, False)] = row.testing
        counts[CountKey(label, Split.VALIDATION, False)] = row.validation
    return counts


def load_expected_counts(path: PathLike = EXPECTED_COUNTS) -> Counter:
    with open(path) as infh:
        table = ExpectedTable.model_validate_json(infh.read())
    return expected_counts(table.root)


class CellDiff(NamedTuple):
    key: CountKey
    expected: int
    actual: int

    @property
    def diff(self) -> int:
        return self.actual - self.expected


class AccountingReport(NamedTuple):
    passed: bool
    diffs: list[CellDiff]

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "diffs": [
                {
                    "class": d.key.label.label,
                    "split": d.key.split.value,
                    "synthetic": d.key.synthetic,
                    "expected": d.expected,
                    "actual": d.actual,
                    "diff": d.diff,
                }
                for d in self.diffs
            ],
        }


def verify_split_accounting(manifest: DatasetManifest, expected: Mapping[CountKey, int]) -> AccountingReport:
    """Compare every (class, split, synthetic) cell with an expected table."""
    diffs = []
    for key in sorted(set(expected) | set(manifest.counts)):
        want = expected.get(key, 0)
        have = manifest.counts.get(key, 0)
        if want != have:
            LOGGER.info("Count mismatch in %s: expected %d, found %d", key.describe(), want, have)
            diffs.append(CellDiff(key, want, have))
    return AccountingReport(not diffs, diffs)


def dedup_by_digest(manifest: DatasetManifest) -> tuple[DatasetManifest, list[str]]:
    """Keep only the first record (in manifest order) for each sha256."""
    seen: set[str] = set()
    kept = []
    removed = []
    for sample in manifest.samples:
        if sample.sha256 in seen:
            LOGGER.warning("Removing duplicate image %s (%s)", sample.id, sample.sha256)
            removed.append(sample.id)
            continue
        seen.add(sample.sha256)
        kept.append(sample)
    return DatasetManifest(kept), removed


def split_labels(manifest: DatasetManifest, split: Split) -> dict[str, ClassLabel]:
    """Ground-truth labels of one split, keyed by sample id."""
    return {s.id: s.label for s in manifest.split(split)}
