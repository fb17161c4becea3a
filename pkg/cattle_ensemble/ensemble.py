"""
Weighted-average fusion of the three base models, the simplex grid
search over fusion weights, temperature calibration and the ablation
configurations.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from os import PathLike
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .export import fmt, write_csv, write_json
from .labels import ClassLabel, as_prob_matrix, argmax_index, softmax
from .optim import (
    PROB_FLOOR,
    AdamWState,
    FitResult,
    SgdMomentumState,
    fit,
    mean_cross_entropy,
)
from .predictions import PredictionSet, ScoreKind, check_same_ids
from .pydantic_models import BASE_MODELS, FusionConfig, ModelName, TrainControl

LOGGER = logging.getLogger("cattle-ensemble")

DEFAULT_FUSION = Path(__file__).parent / "data" / "fusion.json"
GRID_LO = Fraction(1, 10)
GRID_HI = Fraction(1, 2)
GRID_STEP = Fraction(1, 20)
TEMPERATURE_RANGE = (Fraction(1, 2), Fraction(2))
TEMPERATURE_STEP = Fraction(1, 20)

Weights = tuple[Fraction, Fraction, Fraction]


def _exact(value: Union[float, int, str, Fraction]) -> Fraction:
    """Decimal value of a weight as written, e.g. 0.3 -> 3/10."""
    if isinstance(value, (Fraction, int)):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(repr(float(value)))


@dataclass(frozen=True)
class WeightGrid:
    """All weight triples on a step lattice with lo <= w <= hi and sum 1."""

    lo: Fraction
    hi: Fraction
    step: Fraction
    points: tuple[Weights, ...]

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[Weights]:
        return iter(self.points)

    def __contains__(self, weights) -> bool:
        return tuple(_exact(w) for w in weights) in self.points


def enumerate_grid(lo=GRID_LO, hi=GRID_HI, step=GRID_STEP) -> WeightGrid:
    """Enumerate the weight grid in lexicographic order.

    Weights are counted in integer lattice units so every triple sums
    to exactly one.
    """
    lo, hi, step = _exact(lo), _exact(hi), _exact(step)
    if step <= 0 or lo < 0 or hi > 1 or lo > hi:
        raise ValueError("bad grid bounds lo=%s hi=%s step=%s" % (lo, hi, step))
    units = 1 / step
    lo_units = lo / step
    hi_units = hi / step
    if any(x.denominator != 1 for x in (units, lo_units, hi_units)):
        raise ValueError("grid bounds %s..%s are not multiples of step %s" % (lo, hi, step))
    n, a_lo, a_hi = int(units), int(lo_units), int(hi_units)
    points = []
    for a in range(a_lo, a_hi + 1):
        for b in range(a_lo, a_hi + 1):
            c = n - a - b
            if a_lo <= c <= a_hi:
                points.append((Fraction(a, n), Fraction(b, n), Fraction(c, n)))
    return WeightGrid(lo, hi, step, tuple(points))


def _check_weights(weights: Sequence[float], n_models: int) -> np.ndarray:
    if len(weights) != n_models:
        raise ValueError("%d weights for %d models" % (len(weights), n_models))
    w = np.array([float(x) for x in weights], dtype=np.float64)
    if np.any(w < 0.0) or abs(sum(_exact(x) for x in weights) - 1) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1: %s" % list(weights))
    return w


def _aligned(models: Sequence[PredictionSet]) -> list[PredictionSet]:
    if not models:
        raise ValueError("no models to fuse")
    ids = models[0].ids
    for other in models[1:]:
        check_same_ids(ids, other.ids, "%s vs %s" % (models[0].model.value, other.model.value))
    return [m.reindex(ids) for m in models]


def fuse(models: Sequence[PredictionSet], weights: Sequence[float]) -> PredictionSet:
    """Weighted average of the models' probabilities, per sample id.

    Logit inputs are softmaxed first.  Rows come out in the order of
    the first model's ids.
    """
    models = _aligned(models)
    w = _check_weights(weights, len(models))
    stack = np.stack([m.probs() for m in models])
    fused = np.tensordot(w, stack, axes=1)
    return PredictionSet(
        ModelName.ENSEMBLE, ScoreKind.PROBS, models[0].ids, np.array(as_prob_matrix(fused))
    )


def temperature_scale(z, temperature: float) -> np.ndarray:
    """softmax(z / T) for a logit vector or an (N, 6) stack."""
    if not temperature > 0.0:
        raise ValueError("temperature must be positive, got %r" % temperature)
    return softmax(np.asarray(z, dtype=np.float64) / temperature)


def pseudo_logits(probs: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR))


def calibrate_fused(fused: PredictionSet, temperature: float) -> PredictionSet:
    """Temperature-scale fused probabilities through their pseudo-logits."""
    probs = temperature_scale(pseudo_logits(fused.probs()), temperature)
    return PredictionSet(ModelName.ENSEMBLE, ScoreKind.PROBS, fused.ids, np.array(probs))


class FusedPrediction(NamedTuple):
    id: str
    ensemble_prob: np.ndarray
    calibrated_prob: np.ndarray
    predicted: ClassLabel


@dataclass(frozen=True)
class FusedPredictions:
    """Output of the full fuse-then-calibrate pipeline."""

    ensemble: PredictionSet
    calibrated: PredictionSet

    @property
    def ids(self) -> tuple[str, ...]:
        return self.ensemble.ids

    @property
    def predicted(self) -> np.ndarray:
        return argmax_index(self.calibrated.scores)

    def by_id(self) -> dict[str, ClassLabel]:
        return {i: ClassLabel(int(k)) for i, k in zip(self.ids, self.predicted)}

    def __iter__(self) -> Iterator[FusedPrediction]:
        for i, p, q, k in zip(self.ids, self.ensemble.scores, self.calibrated.scores, self.predicted):
            yield FusedPrediction(i, p, q, ClassLabel(int(k)))


def run_fusion(models: Sequence[PredictionSet], config: FusionConfig) -> FusedPredictions:
    """Fuse with the configured weights, then calibrate unless T is 1."""
    fused = fuse(models, config.weights)
    if config.temperature == 1.0:
        return FusedPredictions(fused, fused)
    return FusedPredictions(fused, calibrate_fused(fused, config.temperature))


def label_indices(ids: Sequence[str], labels: Mapping[str, ClassLabel]) -> np.ndarray:
    """Class indices of ``labels`` in the order of ``ids``."""
    check_same_ids(labels.keys(), ids, "label")
    return np.array([int(labels[i]) for i in ids], dtype=np.int64)


def nll(probs: PredictionSet, labels: Mapping[str, ClassLabel]) -> float:
    """Mean negative log-likelihood of the true classes."""
    return mean_cross_entropy(probs.probs(), label_indices(probs.ids, labels))


class GridPoint(NamedTuple):
    weights: Weights
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


class GridSearchResult(NamedTuple):
    best: Weights
    scores: list[GridPoint]

    @property
    def best_accuracy(self) -> float:
        return next(p.accuracy for p in self.scores if p.weights == self.best)


def grid_search_weights(
    models: Sequence[PredictionSet],
    labels: Mapping[str, ClassLabel],
    grid: Optional[WeightGrid] = None,
) -> GridSearchResult:
    """Validation accuracy at every grid point.

    The winner is the most accurate point; ties go to the
    lexicographically smallest triple.
    """
    grid = grid or enumerate_grid()
    models = _aligned(models)
    if len(models[0]) == 0:
        raise ValueError("empty validation set")
    y = label_indices(models[0].ids, labels)
    stack = np.stack([m.probs() for m in models])
    scores = []
    best: Optional[GridPoint] = None
    for point in tqdm(grid.points, desc="Grid search", disable=None):
        fused = np.tensordot(np.array([float(w) for w in point]), stack, axes=1)
        correct = int(np.sum(argmax_index(fused) == y))
        scored = GridPoint(point, correct, len(y))
        scores.append(scored)
        if best is None or scored.correct > best.correct:
            best = scored
    assert best is not None
    LOGGER.info(
        "Best weights %s with validation accuracy %.4f",
        ", ".join("%.2f" % w for w in best.weights),
        best.accuracy,
    )
    return GridSearchResult(best.weights, scores)


def write_grid_csv(result: GridSearchResult, outfile: PathLike) -> None:
    write_csv(
        outfile,
        ["w1", "w2", "w3", "metric"],
        (["%.2f" % w for w in p.weights] + [fmt(p.accuracy)] for p in result.scores),
    )


@dataclass(frozen=True)
class AblationConfig:
    """One row of the component-removal study."""

    drop_model: Optional[ModelName] = None
    calibrate: bool = True

    def __post_init__(self):
        if self.drop_model is not None and self.drop_model not in BASE_MODELS:
            raise ValueError("can only drop a base model, not %s" % self.drop_model)

    @property
    def name(self) -> str:
        if self.drop_model is not None:
            return "without-%s" % self.drop_model.value
        return "full" if self.calibrate else "no-calibration"


ABLATIONS = (
    AblationConfig(),
    AblationConfig(drop_model=ModelName.VGG16),
    AblationConfig(drop_model=ModelName.RESNET50),
    AblationConfig(drop_model=ModelName.INCEPTIONV3),
    AblationConfig(calibrate=False),
)


def apply_ablation(cfg: AblationConfig, base: FusionConfig) -> FusionConfig:
    """Drop a model (renormalizing the others) and/or switch off calibration."""
    weights = [_exact(w) for w in base.weights]
    if cfg.drop_model is not None:
        index = BASE_MODELS.index(cfg.drop_model)
        rest = sum(weights) - weights[index]
        if rest == 0:
            raise ValueError("dropping %s leaves an empty ensemble" % cfg.drop_model.value)
        weights = [Fraction(0) if k == index else w / rest for k, w in enumerate(weights)]
    temperature = base.temperature if cfg.calibrate else 1.0
    if cfg.drop_model is None and cfg.calibrate:
        return base
    return FusionConfig.from_fractions(weights, temperature)


def _temperature_nll_grad(z: np.ndarray, y: np.ndarray, temperature: float) -> float:
    """d NLL / d T = mean(z_y - E_q[z]) / T^2."""
    q = temperature_scale(z, temperature)
    z_y = z[np.arange(len(y)), y]
    expected = np.sum(q * z, axis=1)
    return float(np.mean(z_y - expected) / temperature**2)


def fit_temperature(
    fused: PredictionSet,
    labels: Mapping[str, ClassLabel],
    method: str = "grid",
    start: float = 0.8,
    control: Optional[TrainControl] = None,
) -> float:
    """Temperature in [0.5, 2.0] minimizing NLL of the calibrated probabilities."""
    y = label_indices(fused.ids, labels)
    if len(y) == 0:
        raise ValueError("cannot fit a temperature on an empty split")
    z = pseudo_logits(fused.probs())
    lo, hi = TEMPERATURE_RANGE
    if method == "grid":
        best_t, best_loss = None, math.inf
        t = lo
        while t <= hi:
            loss = mean_cross_entropy(temperature_scale(z, float(t)), y)
            if loss < best_loss:
                best_t, best_loss = t, loss
            t += TEMPERATURE_STEP
        LOGGER.info("Grid temperature %.2f (NLL %.6f)", float(best_t), best_loss)
        return float(best_t)
    if method != "gradient":
        raise ValueError("unknown temperature fitting method %r" % method)

    def clamp(theta):
        return min(max(float(theta[0]), float(lo)), float(hi))

    def objective(theta):
        return mean_cross_entropy(temperature_scale(z, clamp(theta)), y)

    def gradient(theta):
        return np.array([_temperature_nll_grad(z, y, clamp(theta))])

    result = fit(
        objective,
        [start],
        AdamWState(lr=0.01, weight_decay=0.0),
        control or TrainControl(max_epochs=200),
        gradient=gradient,
    )
    temperature = clamp(result.params)
    LOGGER.info("Fitted temperature %.4f (NLL %.6f)", temperature, result.val_loss)
    return temperature


def _fusion_nll_and_grad(stack: np.ndarray, y: np.ndarray, theta: np.ndarray):
    w = softmax(theta)
    picked = stack[:, np.arange(len(y)), y]  # (models, N)
    p_y = np.maximum(w @ picked, PROB_FLOOR)
    loss = float(-np.mean(np.log(p_y)))
    grad_w = -np.mean(picked / p_y, axis=1)
    jacobian = np.diag(w) - np.outer(w, w)
    return loss, jacobian @ grad_w


def fit_fusion_weights(
    models: Sequence[PredictionSet],
    labels: Mapping[str, ClassLabel],
    optimizer: Optional[Union[AdamWState, SgdMomentumState]] = None,
    control: Optional[TrainControl] = None,
) -> tuple[tuple[float, float, float], FitResult]:
    """Fit fusion weights by minimizing validation NLL.

    The weights are a softmax of three free parameters, so every iterate
    stays on the simplex.
    """
    models = _aligned(models)
    y = label_indices(models[0].ids, labels)
    if len(y) == 0:
        raise ValueError("cannot fit weights on an empty split")
    stack = np.stack([m.probs() for m in models])
    result = fit(
        lambda theta: _fusion_nll_and_grad(stack, y, theta)[0],
        np.zeros(len(models)),
        optimizer or SgdMomentumState(lr=0.1, momentum=0.9),
        control or TrainControl(max_epochs=200),
        gradient=lambda theta: _fusion_nll_and_grad(stack, y, theta)[1],
    )
    w = softmax(result.params)
    LOGGER.info("Fitted fusion weights %s (NLL %.6f)", np.round(w, 4).tolist(), result.val_loss)
    return (float(w[0]), float(w[1]), float(w[2])), result


def save_fusion_config(config: FusionConfig, outfile: PathLike) -> None:
    write_json(config.model_dump(mode="json"), outfile)


def load_fusion_config(path: PathLike = DEFAULT_FUSION) -> FusionConfig:
    with open(path) as infh:
        return FusionConfig.model_validate_json(infh.read())
