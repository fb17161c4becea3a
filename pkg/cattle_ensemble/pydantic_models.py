"""
Pydantic models for manifests, configuration files and reports.
"""

import re
from datetime import datetime
from enum import Enum
from fractions import Fraction
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .labels import CLASS_NAMES, ClassLabel

DEFAULT_TEMPERATURE = 0.8
WEIGHT_TOLERANCE = 1e-9
SYNTHETIC_CLASSES = frozenset(
    {ClassLabel.FMD_FOOT, ClassLabel.FMD_MOUTH, ClassLabel.LSD_SKIN}
)


class Split(str, Enum):
    TRAINING = "training"
    TESTING = "testing"
    VALIDATION = "validation"


class ModelName(str, Enum):
    """Base models of the ensemble, plus the fused stream itself."""

    VGG16 = "vgg16"
    RESNET50 = "resnet50"
    INCEPTIONV3 = "inceptionv3"
    ENSEMBLE = "ensemble"


BASE_MODELS = (ModelName.VGG16, ModelName.RESNET50, ModelName.INCEPTIONV3)


class GpsFix(BaseModel):
    lat: float = Field(ge=-90.0, le=90.0, description="Latitude in degrees")
    lon: float = Field(ge=-180.0, le=180.0, description="Longitude in degrees")


class Provenance(BaseModel):
    """Where and from which animal an image was taken."""

    farm_id: str = Field(description="Farm identifier")
    gps: GpsFix
    timestamp: str = Field(description="ISO-8601 acquisition time")
    breed: str = Field(description="Cattle breed")
    age_months: int = Field(ge=0, description="Age of the animal in months")
    vet_confirmed: bool = Field(description="Diagnosis confirmed by a veterinarian")

    @field_validator("timestamp")
    @classmethod
    def _iso8601(cls, value: str) -> str:
        # Syntax only, no timezone normalization
        try:
            datetime.fromisoformat(re.sub(r"Z$", "+00:00", value))
        except ValueError:
            raise ValueError("not an ISO-8601 timestamp: %r" % value) from None
        return value


class SampleRecord(BaseModel):
    """One image of the dataset with its provenance."""

    model_config = ConfigDict(extra="allow")

    id: str = Field(min_length=1, description="Sample id, also the stem of derived file names")
    path: str = Field(min_length=1, description="Image path relative to the manifest")
    label: ClassLabel = Field(alias="class")
    split: Split
    synthetic: bool = False
    sha256: str = Field(pattern=r"^[0-9a-f]{64}$")
    source: Provenance

    @field_validator("id")
    @classmethod
    def _file_safe_id(cls, value: str) -> str:
        if value in (".", "..") or re.search(r"[\\/\x00]", value):
            raise ValueError("id %r cannot be used as a file name" % value)
        return value

    @field_validator("label", mode="before")
    @classmethod
    def _class_name(cls, value):
        if isinstance(value, str):
            if value not in CLASS_NAMES:
                raise ValueError("unknown class %r" % value)
            return ClassLabel.from_name(value)
        return value

    @model_validator(mode="after")
    def _synthetic_classes(self) -> "SampleRecord":
        if self.synthetic and self.label not in SYNTHETIC_CLASSES:
            raise ValueError(
                "synthetic images are only allowed for %s"
                % ", ".join(sorted(c.label for c in SYNTHETIC_CLASSES))
            )
        return self

    def to_json_dict(self) -> dict:
        data = self.model_dump(mode="json", by_alias=True, exclude_unset=False)
        data["class"] = self.label.label
        return data


class FusionConfig(BaseModel):
    """Ensemble weights (VGG16, ResNet50, InceptionV3) and temperature."""

    weights: tuple[float, float, float] = (0.30, 0.30, 0.40)
    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0.0)

    @field_validator("weights")
    @classmethod
    def _on_simplex(cls, value: tuple[float, float, float]):
        if any(w < 0.0 or w > 1.0 for w in value):
            raise ValueError("weights must lie in [0, 1]: %s" % (value,))
        if abs(sum(value) - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError("weights must sum to 1: %s" % (value,))
        return value

    @classmethod
    def from_fractions(cls, weights, temperature: float = DEFAULT_TEMPERATURE):
        return cls(weights=tuple(float(Fraction(w)) for w in weights), temperature=temperature)


class AugmentSpec(BaseModel):
    """Sampling intervals for the random augmentation parameters."""

    rotation_deg: tuple[float, float] = (-35.0, 35.0)
    width_shift: tuple[float, float] = (0.0, 0.3)
    height_shift: tuple[float, float] = (0.0, 0.3)
    zoom: tuple[float, float] = (0.7, 1.3)
    brightness: tuple[float, float] = (0.6, 1.4)
    channel_shift: tuple[float, float] = (0.0, 60.0)
    fill: str = Field("nearest", pattern="^nearest$")

    @model_validator(mode="after")
    def _within_ranges(self) -> "AugmentSpec":
        limits = {
            "rotation_deg": (-35.0, 35.0),
            "width_shift": (0.0, 0.3),
            "height_shift": (0.0, 0.3),
            "zoom": (0.7, 1.3),
            "brightness": (0.6, 1.4),
            "channel_shift": (0.0, 60.0),
        }
        for name, (lo_limit, hi_limit) in limits.items():
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError("%s: lower bound %g exceeds upper %g" % (name, lo, hi))
            if lo < lo_limit or hi > hi_limit:
                raise ValueError(
                    "%s: [%g, %g] outside [%g, %g]" % (name, lo, hi, lo_limit, hi_limit)
                )
        return self

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(
            rotation_deg=(0.0, 0.0),
            width_shift=(0.0, 0.0),
            height_shift=(0.0, 0.0),
            zoom=(1.0, 1.0),
            brightness=(1.0, 1.0),
            channel_shift=(0.0, 0.0),
        )


class SyntheticSpec(BaseModel):
    """Recipe for desk-scale stand-ins of the base models' outputs."""

    n_per_class: dict[str, int] = Field(
        default_factory=lambda: {name: 1000 for name in CLASS_NAMES}
    )
    model_accuracies: tuple[float, float, float] = (0.94, 0.96, 0.98)
    confusion_bias: list[tuple[str, str]] = Field(
        default_factory=lambda: [("fmd-foot", "healthy-foot"), ("fmd-mouth", "healthy-mouth")]
    )
    score_sharpness: float = Field(4.0, gt=0.0)
    score_jitter: float = Field(1.0, ge=0.0)
    splits: list[Split] = Field(default_factory=lambda: [Split.VALIDATION, Split.TESTING])

    @field_validator("n_per_class")
    @classmethod
    def _counts(cls, value: dict[str, int]):
        for name, count in value.items():
            if name not in CLASS_NAMES:
                raise ValueError("unknown class %r" % name)
            if count < 0:
                raise ValueError("negative count for %s" % name)
        return value

    @field_validator("model_accuracies")
    @classmethod
    def _accuracies(cls, value):
        if any(not (0.0 < a <= 1.0) for a in value):
            raise ValueError("accuracies must lie in (0, 1]: %s" % (value,))
        return value

    @field_validator("confusion_bias")
    @classmethod
    def _pairs(cls, value):
        for a, b in value:
            if a not in CLASS_NAMES or b not in CLASS_NAMES or a == b:
                raise ValueError("bad confusion pair %s/%s" % (a, b))
        return value

    @model_validator(mode="after")
    def _argmax_preserved(self) -> "SyntheticSpec":
        if self.score_jitter >= self.score_sharpness:
            raise ValueError("score_jitter must be smaller than score_sharpness")
        return self


class TrainControl(BaseModel):
    """Callback settings for the fitting loop."""

    max_epochs: int = Field(200, gt=0)
    batch_size: int = Field(32, gt=0)
    lr_reduce_factor: float = Field(0.2, gt=0.0, lt=1.0)
    lr_reduce_patience: int = Field(10, gt=0)
    early_stop_patience: int = Field(20, gt=0)
    early_stopping: bool = True
    min_delta: float = Field(1e-6, ge=0.0)


class PerClassRow(BaseModel):
    label: str = Field(alias="class")
    precision: float
    recall: float
    f1: float
    specificity: float
    support: int
    undefined_precision: bool = False
    undefined_recall: bool = False
    undefined_specificity: bool = False

    model_config = ConfigDict(populate_by_name=True)


class MetricsReport(BaseModel):
    """The ten headline metrics plus per-class rows."""

    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc_roc: Optional[float] = None
    cohens_kappa: float
    balanced_accuracy: float
    mcc: float
    macro_specificity: float
    g_mean: float
    per_class: list[PerClassRow]
    support: int = 0
    nll: Optional[float] = None


class FailedImage(BaseModel):
    id: str
    reason: str


class PrepReport(BaseModel):
    processed: int = 0
    failed: list[FailedImage] = []
    flagged_low_edge_density: list[str] = []
    flagged_low_psnr: list[str] = []
    seed: int = 0


class RunManifest(BaseModel):
    """Everything needed to reproduce one command invocation."""

    command: str
    version: str
    seed: int
    arguments: dict[str, Any]
    inputs: dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    outputs: list[str] = []
