"""
Loss, optimizer update rules and the epoch loop used to fit fusion
parameters.

The update rules are written exactly as printed: AdamW with
bias-corrected moments and decoupled weight decay, and SGD in its
heavy-ball form that uses the previous iterate rather than a velocity
accumulator.  ``fit`` carries the training callbacks: learning-rate
reduction on plateau, early stopping and best-snapshot checkpointing.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from os import PathLike
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from .export import write_csv
from .labels import OneHotTarget, ProbVector
from .prng import Xoshiro256
from .pydantic_models import TrainControl

LOGGER = logging.getLogger("cattle-ensemble")

PROB_FLOOR = 1e-12
FD_STEP = 1e-5

Objective = Callable[[np.ndarray], float]
Gradient = Callable[[np.ndarray], np.ndarray]


def cross_entropy(y: OneHotTarget, p: ProbVector) -> float:
    """Categorical cross-entropy with probabilities floored at 1e-12."""
    y = np.asarray(y, dtype=np.float64)
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    return float(-np.sum(y * np.log(p)))


def mean_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean loss over an (N, 6) stack, targets given as class indices."""
    probs = np.asarray(probs, dtype=np.float64)
    picked = probs[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def _check_grads(grads: np.ndarray) -> None:
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient: %s" % np.asarray(grads).tolist())


@dataclass(frozen=True)
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SgdMomentumState:
    lr: float = 0.005
    momentum: float = 0.9
    prev_params: Optional[np.ndarray] = None


OptimizerState = Union[AdamWState, SgdMomentumState]


def adamw_preset() -> AdamWState:
    """Settings used to fine-tune VGG16."""
    return AdamWState(lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)


def sgd_preset() -> SgdMomentumState:
    """Settings used to fine-tune ResNet50 and InceptionV3."""
    return SgdMomentumState(lr=0.005, momentum=0.9)


def adamw_step(params, grads, state: AdamWState) -> tuple[np.ndarray, AdamWState]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError("gradient shape %s != parameter shape %s" % (grads.shape, params.shape))
    _check_grads(grads)
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    if m.shape != params.shape:
        raise ValueError("optimizer state does not match parameter shape %s" % (params.shape,))
    t = state.t + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) - state.lr * state.weight_decay * params
    return new, replace(state, t=t, m=m, v=v)


def sgd_momentum_step(params, grads, state: SgdMomentumState) -> tuple[np.ndarray, SgdMomentumState]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError("gradient shape %s != parameter shape %s" % (grads.shape, params.shape))
    _check_grads(grads)
    prev = params if state.prev_params is None else state.prev_params
    if prev.shape != params.shape:
        raise ValueError("optimizer state does not match parameter shape %s" % (params.shape,))
    new = params - state.lr * grads + state.lr * state.momentum * (params - prev)
    return new, replace(state, prev_params=params.copy())


def optimizer_step(params, grads, state: OptimizerState):
    if isinstance(state, AdamWState):
        return adamw_step(params, grads, state)
    return sgd_momentum_step(params, grads, state)


def numerical_gradient(f: Objective, params, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    for i in range(params.size):
        step = np.zeros_like(params)
        step.flat[i] = h
        grad.flat[i] = (f(params + step) - f(params - step)) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class MiniBatchObjective:
    """Objective that is a sum over samples; ``loss(params, indices)``
    evaluates it on a batch."""

    loss: Callable[[np.ndarray, np.ndarray], float]
    n_samples: int
    gradient: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def full(self, params: np.ndarray) -> float:
        return self.loss(params, np.arange(self.n_samples))


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    params: np.ndarray
    val_loss: float
    epoch: int
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False


def fit(  # noqa: C901
    objective: Union[Objective, MiniBatchObjective],
    params,
    optimizer: OptimizerState,
    control: Optional[TrainControl] = None,
    validation_objective: Optional[Objective] = None,
    gradient: Optional[Gradient] = None,
    seed: int = 0,
) -> FitResult:
    """Minimize ``objective`` one optimizer step per epoch, checking the
    validation objective after every epoch."""
    control = control or TrainControl()
    params = np.array(params, dtype=np.float64)
    rng = Xoshiro256.substream(seed, "minibatch")
    if isinstance(objective, MiniBatchObjective):
        batched = objective
        validation = validation_objective or batched.full
    else:
        batched = None
        validation = validation_objective or objective

    best = FitResult(params.copy(), math.inf, 0)
    reference = math.inf  # loss the patience counters measure improvement against
    plateau_wait = 0
    stop_wait = 0
    state = optimizer
    for epoch in range(1, control.max_epochs + 1):
        if batched is not None:
            size = min(control.batch_size, batched.n_samples)
            batch = np.array(sorted(rng.randbelow(batched.n_samples) for _ in range(size)))

            def train_fn(p, batch=batch):
                return batched.loss(p, batch)

            grad_fn = (lambda p, batch=batch: batched.gradient(p, batch)) if batched.gradient else None
        else:
            train_fn = objective  # type: ignore[assignment]
            grad_fn = gradient
        train_loss = float(train_fn(params))
        if not math.isfinite(train_loss):
            raise FloatingPointError("objective is %r at epoch %d (params %s)" % (train_loss, epoch, params.tolist()))
        grads = grad_fn(params) if grad_fn is not None else numerical_gradient(train_fn, params)
        lr = state.lr
        params, state = optimizer_step(params, grads, state)
        val_loss = float(validation(params))
        if not math.isfinite(val_loss):
            raise FloatingPointError("validation objective is %r at epoch %d" % (val_loss, epoch))
        best.history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        LOGGER.debug("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr)

        if val_loss < best.val_loss:
            best.params = params.copy()
            best.val_loss = val_loss
            best.epoch = epoch
        if val_loss < reference - control.min_delta:
            reference = val_loss
            plateau_wait = 0
            stop_wait = 0
            continue
        plateau_wait += 1
        stop_wait += 1
        if control.early_stopping and stop_wait >= control.early_stop_patience:
            LOGGER.info("Early stopping at epoch %d (best epoch %d)", epoch, best.epoch)
            best.stopped_early = True
            break
        if plateau_wait >= control.lr_reduce_patience:
            state = replace(state, lr=state.lr * control.lr_reduce_factor)
            plateau_wait = 0
            LOGGER.info("Reducing learning rate to %.3g at epoch %d", state.lr, epoch)
    return best


def write_history_csv(history: list[EpochRecord], outfile: PathLike) -> None:
    write_csv(
        outfile,
        ["epoch", "train_loss", "val_loss", "lr"],
        ([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)] for r in history),
    )


def read_history_csv(infile: PathLike) -> list[EpochRecord]:
    with open(infile, newline="") as infh:
        return [
            EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]), float(row["lr"]))
            for row in csv.DictReader(infh)
        ]
