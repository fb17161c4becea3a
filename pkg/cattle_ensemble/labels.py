"""
Class labels and elementary operations on six-wide score vectors.

Every matrix, file and report in the package uses the class order
defined here (the row order of the dataset composition table).
"""

import logging
from enum import IntEnum
from typing import Iterable, Union

import numpy as np
from numpy.typing import NDArray

LOGGER = logging.getLogger("cattle-ensemble")

N_CLASSES = 6
PROB_TOLERANCE = 1e-9
RENORMALIZE_TOLERANCE = 1e-6

"""Score vectors are plain read-only float arrays of shape (6,) or (N, 6)."""
LogitVector = NDArray[np.float64]
ProbVector = NDArray[np.float64]
OneHotTarget = NDArray[np.int64]


class ProbabilityError(ValueError):
    """A score vector failed validation."""


class ClassLabel(IntEnum):
    """The six target classes, in canonical order."""

    FMD_FOOT = 0
    FMD_MOUTH = 1
    HEALTHY_FOOT = 2
    HEALTHY_MOUTH = 3
    HEALTHY_SKIN = 4
    LSD_SKIN = 5

    @property
    def label(self) -> str:
        """Dataset name of the class, e.g. ``fmd-foot``."""
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_name(cls, name: str) -> "ClassLabel":
        try:
            return cls[name.upper().replace("-", "_")]
        except KeyError:
            raise ValueError("Unknown class name %r" % name) from None

    def __str__(self) -> str:
        return self.label


CLASS_NAMES = tuple(c.label for c in ClassLabel)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def as_logit_vector(values: Union[Iterable[float], np.ndarray]) -> LogitVector:
    """Validate a single vector of six finite logits."""
    z = np.array(values, dtype=np.float64)
    if z.shape != (N_CLASSES,):
        raise ProbabilityError("Expected %d scores, got shape %s" % (N_CLASSES, z.shape))
    if not np.all(np.isfinite(z)):
        raise ProbabilityError("Logits must be finite: %s" % z.tolist())
    return _frozen(z)


def as_logit_matrix(values: Union[Iterable, np.ndarray]) -> LogitVector:
    """Validate an (N, 6) stack of logits."""
    z = np.array(values, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != N_CLASSES:
        raise ProbabilityError("Expected N x %d scores, got shape %s" % (N_CLASSES, z.shape))
    if not np.all(np.isfinite(z)):
        raise ProbabilityError("Logits must be finite")
    return _frozen(z)


def as_prob_matrix(values: Union[Iterable, np.ndarray]) -> ProbVector:
    """Validate an (N, 6) stack of probability vectors.

    Rows whose sum is off by at most 1e-6, or with an entry above 1 by at
    most that much, are renormalized (this absorbs rounding from text
    serialization); anything further off is an error.
    """
    p = np.array(values, dtype=np.float64)
    if p.ndim == 1:
        p = p[np.newaxis, :]
    if p.ndim != 2 or p.shape[1] != N_CLASSES:
        raise ProbabilityError("Expected N x %d scores, got shape %s" % (N_CLASSES, p.shape))
    if not np.all(np.isfinite(p)):
        raise ProbabilityError("Probabilities must be finite")
    if np.any(p < 0.0) or np.any(p > 1.0 + RENORMALIZE_TOLERANCE):
        raise ProbabilityError("Probabilities must lie in [0, 1]")
    sums = p.sum(axis=1)
    off = np.abs(sums - 1.0)
    if np.any(off > RENORMALIZE_TOLERANCE):
        bad = int(np.argmax(off))
        raise ProbabilityError(
            "Probability row %d sums to %.9f, not 1" % (bad, float(sums[bad]))
        )
    needs_fix = (off > PROB_TOLERANCE) | np.any(p > 1.0, axis=1)
    if np.any(needs_fix):
        LOGGER.debug("Renormalizing %d probability rows", int(needs_fix.sum()))
        p[needs_fix] /= sums[needs_fix, np.newaxis]
    return _frozen(p)


def as_prob_vector(values: Union[Iterable[float], np.ndarray]) -> ProbVector:
    """Validate a single probability vector."""
    p = np.array(values, dtype=np.float64)
    if p.shape != (N_CLASSES,):
        raise ProbabilityError("Expected %d scores, got shape %s" % (N_CLASSES, p.shape))
    return _frozen(np.array(as_prob_matrix(p)[0]))


def softmax(z: Union[LogitVector, Iterable[float]]) -> ProbVector:
    """Numerically stable softmax over the last axis.

    Works on a single vector or an (N, 6) matrix.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ProbabilityError("Logits must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _frozen(e / e.sum(axis=-1, keepdims=True))


def argmax_index(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax; numpy returns the first maximum, i.e. the lowest index."""
    return np.argmax(np.asarray(p), axis=-1)


def argmax_class(p: Union[ProbVector, Iterable[float]]) -> ClassLabel:
    """Label of the largest entry, ties broken toward the lowest index."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (N_CLASSES,):
        raise ProbabilityError("Expected %d scores, got shape %s" % (N_CLASSES, p.shape))
    return ClassLabel(int(argmax_index(p)))


def one_hot(label: ClassLabel) -> OneHotTarget:
    y = np.zeros(N_CLASSES, dtype=np.int64)
    y[ClassLabel(label).value] = 1
    return _frozen(y)
