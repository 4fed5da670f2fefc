"""Losses and optimizers of the training recipes.

Cross-entropy over all seen classes, distillation against a shift-corrected
teacher over the old classes, their weighted sum, and SGD (with or without
momentum) or Adam with step, cosine or warm-up learning-rate schedules.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from energy_aligning.aligning import ShiftVector, apply_shifts
from energy_aligning.config import (
    DEFAULT_LAMBDA_BASE,
    DEFAULT_MOMENTUM,
    DEFAULT_TEMPERATURE,
    DEFAULT_WEIGHT_DECAY_FACTOR,
)
from energy_aligning.data import LabeledDataset
from energy_aligning.errors import ConfigurationError, ContractViolation, TrainingDivergedError
from energy_aligning.model import Gradients, MlpClassifier
from energy_aligning.numerics import log_softmax_rows, softmax_rows

logger = logging.getLogger(__name__)

SCHEDULES = ("constant", "step", "cosine")
OPTIMIZERS = ("sgd-momentum", "sgd", "adam")


@dataclass(frozen=True)
class SgdConfig:
    """Optimizer and schedule settings for one training run.

    ``learning_rate`` is the base rate; ``schedule`` is ``constant``, ``step``
    (multiply by ``decay_factor`` at each epoch in ``milestones``) or ``cosine``
    (decay to 0 over ``epochs``). ``warmup_epochs`` prepends a linear warm-up.
    """

    learning_rate: float = 0.1
    schedule: str = "cosine"
    milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1
    warmup_epochs: int = 0
    optimizer: str = "sgd-momentum"
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epoch counts >= 0")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))


@dataclass(frozen=True)
class CilConfig:
    """Class-incremental recipe: loss balance, per-step weight decay, rehearsal budget."""

    steps: int = 5
    classes_per_step: int | None = None
    lambda_base: float = DEFAULT_LAMBDA_BASE
    weight_decay_base: float = 5e-4
    weight_decay_factor: float = DEFAULT_WEIGHT_DECAY_FACTOR
    memory: int = 50
    energy_aligning: bool = True
    class_order_seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigurationError("steps must be at least 1")
        if self.memory < 0:
            raise ConfigurationError("memory must be non-negative")
        if self.lambda_base < 0:
            raise ConfigurationError("lambda_base must be non-negative")
        if not 0.0 < self.weight_decay_factor <= 1.0:
            raise ConfigurationError("weight_decay_factor must lie in (0, 1]")
        if self.weight_decay_base < 0:
            raise ConfigurationError("weight_decay_base must be non-negative")


@dataclass(frozen=True, eq=False)
class LossResult:
    """Mean loss over a batch and its gradient with respect to the logits."""

    loss: float
    grad: np.ndarray
    param_grads: Gradients | None = None


def learning_rate_at(config: SgdConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``."""
    lr = config.learning_rate
    if config.schedule == "step":
        passed = sum(1 for m in config.milestones if epoch >= m)
        lr *= config.decay_factor ** passed
    elif config.schedule == "cosine" and config.epochs > 0:
        lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
    if epoch < config.warmup_epochs:
        lr *= (epoch + 1) / config.warmup_epochs
    return lr


def step_weight_decay(r_base: float, eta: float, step: int) -> float:
    """Weight decay of incremental step ``step`` (1-based): ``r_base * eta ** (step - 1)``."""
    if step < 1:
        raise ContractViolation("incremental steps are numbered from 1")
    return r_base * eta ** (step - 1)


def compound_lambda(lambda_base: float, old_classes: int, new_classes: int) -> float:
    """Distillation weight ``lambda_base * C_old / (C_new + C_old)``; 0 without old classes."""
    if old_classes == 0:
        return 0.0
    return lambda_base * old_classes / (new_classes + old_classes)


def _batched(logits: np.ndarray) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    return arr if arr.ndim == 2 else arr.reshape(1, -1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray | int) -> LossResult:
    """``-log softmax(logits)[label]`` averaged over rows, gradient ``softmax - onehot``.

    Accepts one logit row with an integer label or an ``N x C`` batch with ``N``
    labels; the batch gradient is divided by ``N``.
    """
    z = _batched(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if y.shape != (n,) or y.min() < 0 or y.max() >= c:
        raise ContractViolation("labels must be one class index in [0, C) per row")
    log_p = log_softmax_rows(z)
    rows = np.arange(n)
    loss = float(-log_p[rows, y].mean())
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    grad /= n
    return LossResult(loss, grad if np.ndim(logits) == 2 else grad[0])


def kd_loss(student_old: np.ndarray, teacher_old: np.ndarray, temperature: float) -> LossResult:
    """Distillation ``sum_i -q_teacher(i) log q_student(i)`` with both tempered by ``T``.

    Both inputs cover the old classes only; the teacher logits must already carry
    the teacher's shift scalars. With no old classes the loss is 0.
    """
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    s = _batched(student_old)
    t = _batched(teacher_old)
    if s.shape != t.shape:
        raise ContractViolation("student and teacher slices differ in shape")
    n, c_old = s.shape
    if c_old == 0:
        return LossResult(0.0, np.zeros_like(np.asarray(student_old, dtype=np.float64)))
    q_teacher = softmax_rows(t / temperature)
    log_q_student = log_softmax_rows(s / temperature)
    loss = float(-(q_teacher * log_q_student).sum(axis=1).mean())
    grad = (np.exp(log_q_student) - q_teacher) / (temperature * n)
    return LossResult(loss, grad if np.ndim(student_old) == 2 else grad[0])


def compound_loss_logits(
    logits: np.ndarray,
    labels: np.ndarray,
    teacher_old: np.ndarray | None,
    lam: float,
    temperature: float,
) -> LossResult:
    """``(1 - lam) * CE`` over all classes plus ``lam * KD`` over the first ``C_old`` classes."""
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"lambda {lam} outside [0, 1]")
    ce = cross_entropy(logits, labels)
    if teacher_old is None or lam == 0.0:
        return LossResult((1.0 - lam) * ce.loss, (1.0 - lam) * ce.grad)
    z = _batched(logits)
    t = _batched(teacher_old)
    c_old = t.shape[1]
    if c_old > z.shape[1]:
        raise ContractViolation("teacher covers more classes than the student")
    kd = kd_loss(z[:, :c_old], t, temperature)
    grad = (1.0 - lam) * _batched(ce.grad)
    grad[:, :c_old] += lam * kd.grad
    loss = (1.0 - lam) * ce.loss + lam * kd.loss
    return LossResult(loss, grad if np.ndim(logits) == 2 else grad[0])


def teacher_logits(teacher: MlpClassifier, x: np.ndarray, shifts: ShiftVector | None) -> np.ndarray:
    """Outputs of the corrected teacher ``f_{teacher; alpha}``."""
    logits = teacher.forward(x)
    return logits if shifts is None else apply_shifts(logits, shifts)


def compound_loss(
    student: MlpClassifier,
    x: np.ndarray,
    labels: np.ndarray,
    lam: float,
    temperature: float = DEFAULT_TEMPERATURE,
    teacher: MlpClassifier | None = None,
    teacher_shifts: ShiftVector | None = None,
) -> LossResult:
    """Compound loss of ``student`` on a batch, with logit and parameter gradients."""
    logits = student.forward(x)
    t = None if teacher is None else teacher_logits(teacher, x, teacher_shifts)
    result = compound_loss_logits(logits, labels, t, lam, temperature)
    return LossResult(result.loss, result.grad, student.backward(x, result.grad))


class Optimizer:
    """In-place parameter updates; weight decay is skipped where the mask is False."""

    def step(
        self,
        params: list[np.ndarray],
        grads: list[np.ndarray],
        lr: float,
        weight_decay: float,
        decay_mask: list[bool],
    ) -> None:
        raise NotImplementedError


class MomentumSgd(Optimizer):
    """``v <- mu v + g``; ``theta <- theta - lr (v + r theta)``."""

    def __init__(self, momentum: float) -> None:
        self.momentum = momentum
        self.velocity: list[np.ndarray] | None = None

    def step(self, params, grads, lr, weight_decay, decay_mask):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v, decay in zip(params, grads, self.velocity, decay_mask):
            v *= self.momentum
            v += g
            update = v + weight_decay * p if decay else v
            p -= lr * update


class Adam(Optimizer):
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, betas: tuple[float, float], eps: float) -> None:
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads, lr, weight_decay, decay_mask):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v, decay in zip(params, grads, self.m, self.v, decay_mask):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decay:
                update = update + weight_decay * p
            p -= lr * update


def make_optimizer(config: SgdConfig) -> Optimizer:
    if config.optimizer == "adam":
        return Adam(config.adam_betas, config.adam_eps)
    if config.optimizer == "sgd":
        return MomentumSgd(0.0)
    return MomentumSgd(config.momentum)


def _flat_grads(grads: Gradients) -> list[np.ndarray]:
    flat: list[np.ndarray] = []
    for dw, db in grads:
        flat.append(dw)
        if db is not None:
            flat.append(db)
    return flat


@dataclass
class LossTrace:
    """Per-epoch mean losses as ``(epoch, split, value)`` rows."""

    rows: list[dict[str, Any]] = field(default_factory=list)

    def record(self, epoch: int, split: str, value: float) -> None:
        self.rows.append({"epoch": int(epoch), "split": split, "value": float(value)})

    def extend(self, other: "LossTrace") -> None:
        self.rows.extend(other.rows)

    def values(self, split: str | None = None) -> list[float]:
        return [r["value"] for r in self.rows if split is None or r["split"] == split]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["epoch", "split", "value"])


@dataclass
class TrainResult:
    model: MlpClassifier
    trace: LossTrace


def train(
    model: MlpClassifier,
    dataset: LabeledDataset,
    config: SgdConfig,
    teacher: MlpClassifier | None = None,
    teacher_shifts: ShiftVector | None = None,
    lam: float = 0.0,
    weight_decay: float | None = None,
    split: str = "train",
) -> TrainResult:
    """Train ``model`` in place with mini-batch gradient descent.

    Batches come from a seeded shuffle of the whole dataset every epoch, so a fixed
    ``config.seed`` gives bit-identical parameters. With a teacher the loss is the
    compound loss with weight ``lam``; otherwise plain cross-entropy.

    Args:
        model: Classifier to update (must not be a frozen snapshot).
        dataset: Non-empty training data with labels below ``model.class_count``.
        config: Optimizer, schedule and batching settings.
        teacher: Frozen previous-step model for distillation.
        teacher_shifts: Shift scalars applied to the teacher logits.
        lam: Distillation weight in ``[0, 1]``.
        weight_decay: Overrides ``config.weight_decay`` (per-step schedule).
        split: Label written to the loss trace.

    Returns:
        The trained model and the per-epoch loss trace.

    Raises:
        TrainingDivergedError: If a batch loss is not finite.
    """
    if model.frozen:
        raise ContractViolation("cannot train a frozen snapshot")
    if len(dataset) == 0:
        raise ContractViolation("cannot train on an empty dataset")
    if dataset.labels.max() >= model.class_count:
        raise ContractViolation("dataset labels exceed the model's class count")

    decay = config.weight_decay if weight_decay is None else weight_decay
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(config)
    params = model.parameters()
    mask = model.decay_mask()
    x_all = dataset.features
    y_all = dataset.labels
    t_all = None if teacher is None else teacher_logits(teacher, x_all, teacher_shifts)
    trace = LossTrace()
    n = len(dataset)

    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x_all[idx]
            logits = model.forward(xb)
            tb = None if t_all is None else t_all[idx]
            result = compound_loss_logits(logits, y_all[idx], tb, lam, config.temperature)
            if not math.isfinite(result.loss):
                raise TrainingDivergedError(
                    f"non-finite loss {result.loss} at epoch {epoch} batch {start // config.batch_size} "
                    f"(lr={lr:g})"
                )
            grads = _flat_grads(model.backward(xb, result.grad))
            optimizer.step(params, grads, lr, decay, mask)
            model.step += 1
            total += result.loss * idx.size
        mean_loss = total / n
        trace.record(epoch, split, mean_loss)
        logger.debug("Epoch %d: lr %.5g, %s loss %.6f", epoch, lr, split, mean_loss)

    if config.epochs:
        logger.info("Trained %d epochs on %d samples; final %s loss %.6f",
                    config.epochs, n, split, trace.rows[-1]["value"])
    return TrainResult(model, trace)
