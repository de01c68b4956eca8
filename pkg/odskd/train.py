"""
SGD with heavy-ball momentum, the four phase learning rate schedule, teacher training
and the perturbed-input distillation loop.

The schedule, in epochs of a run with ``T`` epochs:

1. linear warmup from ``0.01 * base_lr`` to ``base_lr`` over the warmup epochs
2. constant ``base_lr`` until ``0.5 T``
3. linear decay to ``0.01 * base_lr`` until ``0.9 T``
4. constant ``0.01 * base_lr`` until the end

During the last phase the parameters with the best validation accuracy are kept and restored
at the end of the run.
"""
# This code is distributed under the MIT License

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from humanfriendly import format_timespan
from scipy.special import softmax

from odskd import diffcore as dc
from odskd.artifacts import PathLike, write_csv
from odskd.data import DataBundle
from odskd.exceptions import ConfigurationError, DomainError, ShapeError, ValidationError
from odskd.losses import LossConfig, combined_distill_loss, cross_entropy, member_cross_entropy
from odskd.metrics import PredictionBatch, accuracy, ensemble_logits, fit_temperature, nll
from odskd.models import (
    BatchEnsembleStudent,
    Classifier,
    DeepEnsemble,
    MlpTeacher,
    ensemble_predict,
    member_probs,
)
from odskd.perturb import PerturbationConfig, Perturber, Strategy

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "train_loss", "val_acc", "val_nll"]

# the best validation snapshot is taken from this fraction of the run onwards
SNAPSHOT_PHASE_START = 0.9

# seed sequence stream used for minibatch order, next to the init stream
BATCH_STREAM = 1

Parameters = Dict[str, np.ndarray]


@dataclass
class ScheduleConfig:
    base_lr: float = 0.1
    total_epochs: int = 100
    warmup_epochs: int = 5

    def __post_init__(self):
        if not self.base_lr > 0:
            raise DomainError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_epochs < 1:
            raise DomainError(f"total_epochs must be positive, got {self.total_epochs}")
        if self.warmup_epochs < 0 or not self.warmup_epochs < 0.5 * self.total_epochs:
            raise DomainError(
                f"warmup_epochs must be in [0, 0.5 * total_epochs), got {self.warmup_epochs}"
                f" for {self.total_epochs} epochs"
            )


def lr_at(epoch: int, cfg: ScheduleConfig) -> float:
    """Learning rate of `epoch` (0-based), constant within an epoch."""
    total = cfg.total_epochs
    if not 0 <= epoch < total:
        raise DomainError(f"Epoch {epoch} out of range for a run of {total} epochs")

    base = cfg.base_lr
    low = 0.01 * base
    half, late = 0.5 * total, SNAPSHOT_PHASE_START * total
    if epoch < cfg.warmup_epochs:
        return low + (base - low) * epoch / cfg.warmup_epochs
    if epoch <= half:
        return base
    if epoch < late:
        return base + (low - base) * (epoch - half) / (late - half)
    return low


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise DomainError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise DomainError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be positive, got {self.batch_size}")


@dataclass
class OptimState:
    velocity: Parameters
    """ One velocity array per parameter, same shapes. """

    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise DomainError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_parameters(
        cls, parameters: Parameters, momentum: float = 0.9, weight_decay: float = 5e-4, lr: float = 0.0
    ) -> OptimState:
        velocity = {name: np.zeros_like(value) for name, value in parameters.items()}
        return cls(velocity, momentum=momentum, weight_decay=weight_decay, lr=lr)


def sgd_step(parameters: Parameters, grads: Parameters, state: OptimState):
    """
    One in-place heavy-ball step for every parameter:
    ``g' = g + wd * theta``, ``v = mu * v + g'``, ``theta = theta - lr * v``.
    """
    if set(parameters) != set(grads) or set(parameters) != set(state.velocity):
        raise ShapeError(
            f"Parameters {sorted(parameters)}, gradients {sorted(grads)}"
            f" and velocities {sorted(state.velocity)} differ"
        )
    for name, theta in parameters.items():
        grad, velocity = grads[name], state.velocity[name]
        if grad.shape != theta.shape or velocity.shape != theta.shape:
            raise ShapeError(
                f"Parameter {name} of shape {theta.shape} with gradient of shape {grad.shape}"
            )
        velocity *= state.momentum
        velocity += grad + state.weight_decay * theta
        theta -= state.lr * velocity


def iterate_minibatches(num_examples: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index arrays of a fresh random permutation, the last batch may be smaller."""
    order = rng.permutation(num_examples)
    for start in range(0, num_examples, batch_size):
        yield order[start : start + batch_size]


@dataclass
class TrainResult:
    model: object
    log: List[dict] = field(default_factory=list)
    """ One row per epoch with the keys of :data:`LOG_COLUMNS`. """

    best_epoch: Optional[int] = None
    best_val_acc: float = math.nan
    duration: float = 0.0
    """ Wall clock seconds. Not stored in checkpoints. """

    @property
    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=LOG_COLUMNS)

    def summary(self) -> dict:
        return {
            "epochs": len(self.log),
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "final_train_loss": self.log[-1]["train_loss"] if self.log else math.nan,
        }


@dataclass
class DistillResult(TrainResult):
    perturbed_examples: int = 0
    degenerate_count: int = 0
    """ Examples that fell back to the clean input because their gradient vanished. """

    def summary(self) -> dict:
        content = super().summary()
        content["perturbed_examples"] = self.perturbed_examples
        content["degenerate_count"] = self.degenerate_count
        return content


BatchLoss = Callable[[np.ndarray], Tuple[float, Parameters]]


def _fit(
    parameters: Parameters,
    batch_loss: BatchLoss,
    val_probs: Callable[[], np.ndarray],
    data: DataBundle,
    sched: ScheduleConfig,
    optim: OptimConfig,
    rng: np.random.Generator,
    description: str,
) -> Tuple[List[dict], Optional[int], float]:
    """The epoch loop shared by all training procedures. Updates `parameters` in place."""
    if data.val.num_examples == 0:
        raise ValidationError("Training needs a nonempty validation split")

    state = OptimState.for_parameters(parameters, optim.momentum, optim.weight_decay)
    snapshot_from = int(SNAPSHOT_PHASE_START * sched.total_epochs)
    log: List[dict] = []
    best: Optional[Parameters] = None
    best_epoch: Optional[int] = None
    best_acc = -math.inf
    val_labels = data.val.labels

    for epoch in range(sched.total_epochs):
        state.lr = lr_at(epoch, sched)
        loss_sum = 0.0
        for indices in iterate_minibatches(data.train.num_examples, optim.batch_size, rng):
            loss, grads = batch_loss(indices)
            sgd_step(parameters, grads, state)
            loss_sum += loss * len(indices)

        batch = PredictionBatch(val_probs(), val_labels)
        row = {
            "epoch": epoch,
            "lr": state.lr,
            "train_loss": loss_sum / data.train.num_examples,
            "val_acc": accuracy(batch),
            "val_nll": nll(batch),
        }
        log.append(row)
        logger.info(
            "%s epoch %d/%d: lr=%.5g train_loss=%.5g val_acc=%.4f val_nll=%.5g",
            description,
            epoch + 1,
            sched.total_epochs,
            row["lr"],
            row["train_loss"],
            row["val_acc"],
            row["val_nll"],
        )

        # strictly better only, the earliest best epoch wins ties
        if epoch >= snapshot_from and row["val_acc"] > best_acc:
            best_acc = row["val_acc"]
            best_epoch = epoch
            best = {name: value.copy() for name, value in parameters.items()}

    if best is not None:
        for name, value in best.items():
            parameters[name][...] = value
        logger.debug("%s: restored snapshot of epoch %d", description, best_epoch)
    return log, best_epoch, best_acc


def _batch_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, BATCH_STREAM])


def train_classifier(
    model: MlpTeacher,
    data: DataBundle,
    sched: ScheduleConfig,
    optim: OptimConfig,
    seed: int,
    description: str = "teacher",
) -> TrainResult:
    """Trains a single classifier with cross-entropy. The minibatch order is drawn from `seed`."""
    _check_dims(model, data)
    features, labels = data.train.features, data.train.labels

    def batch_loss(indices):
        leaves = model.leaves()
        probs = dc.softmax_row(model.forward(dc.constant(features[indices]), leaves))
        loss = cross_entropy(probs, labels[indices])
        dc.backward(loss)
        return float(loss.value), {name: leaf.grad for name, leaf in leaves.items()}

    start = time.monotonic()
    log, best_epoch, best_acc = _fit(
        model.parameters,
        batch_loss,
        lambda: model.predict_proba(data.val.features),
        data,
        sched,
        optim,
        _batch_rng(seed),
        description,
    )
    result = TrainResult(model, log, best_epoch, best_acc, time.monotonic() - start)
    logger.info(
        "Trained %s in %s, best val acc %.4f", description, format_timespan(result.duration), best_acc
    )
    return result


def _check_dims(model, data: DataBundle):
    if model.input_dim != data.train.input_dim or model.num_classes != data.train.num_classes:
        raise ConfigurationError(
            f"Model maps {model.input_dim} -> {model.num_classes} but the data has"
            f" D={data.train.input_dim}, K={data.train.num_classes}"
        )


def check_trainable(data: DataBundle):
    """:raises ValidationError: if the training split holds fewer than two classes."""
    present = np.unique(np.argmax(data.train.labels, axis=1)) if data.train.num_examples else []
    if len(present) < 2:
        raise ValidationError(
            f"Degenerate training data: {len(present)} class(es) present, need at least 2"
        )


def train_teachers(
    data: DataBundle,
    widths: Sequence[int],
    ensemble_size: int,
    sched: ScheduleConfig,
    optim: OptimConfig,
    seeds: Sequence[int],
    on_member: Optional[Callable[[int, TrainResult], None]] = None,
) -> DeepEnsemble:
    """
    Trains `ensemble_size` independent teachers. Member ``i`` is initialized from and shuffles
    with ``seeds[i]``.

    :param on_member: Called with the member index and its :class:`TrainResult` after each
        member finished, e.g. to write its checkpoint right away.
    """
    seeds = [int(seed) for seed in seeds]
    if len(seeds) != ensemble_size:
        raise ValidationError(f"Need {ensemble_size} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValidationError(f"Teacher seeds must be distinct, got {seeds}")
    check_trainable(data)

    members = []
    for index, seed in enumerate(seeds):
        logger.info("Training teacher %d/%d with seed %d", index + 1, ensemble_size, seed)
        teacher = MlpTeacher.initialize(widths, seed)
        result = train_classifier(teacher, data, sched, optim, seed, description=f"teacher {index}")
        teacher.training_meta = {"role": "teacher", "member": index, **result.summary()}
        if on_member is not None:
            on_member(index, result)
        members.append(teacher)
    return DeepEnsemble(members)


def _student_val_probs(student: BatchEnsembleStudent, data: DataBundle) -> Callable[[], np.ndarray]:
    return lambda: ensemble_predict(student.members(), data.val.features)


def _check_teachers(teachers: Sequence[Classifier], student: BatchEnsembleStudent):
    if len(teachers) != student.ensemble_size:
        raise ConfigurationError(
            f"{len(teachers)} teachers for a student with {student.ensemble_size} subnetworks"
        )
    for teacher in teachers:
        if teacher.input_dim != student.input_dim or teacher.num_classes != student.num_classes:
            raise ConfigurationError(
                f"Teacher maps {teacher.input_dim} -> {teacher.num_classes} but the student"
                f" maps {student.input_dim} -> {student.num_classes}"
            )


def distill(
    teachers: Sequence[Classifier],
    student: BatchEnsembleStudent,
    data: DataBundle,
    loss_cfg: LossConfig,
    perturb_cfg: PerturbationConfig,
    sched: ScheduleConfig,
    optim: OptimConfig,
    rng: np.random.Generator,
) -> DistillResult:
    """
    One-to-one distillation of `teachers` into the subnetworks of `student` on perturbed inputs.

    Per minibatch all subnetworks see the same examples; every example gets its perturbation
    from a randomly picked teacher (see :class:`odskd.perturb.Perturber`), and one SGD step is
    taken on :func:`odskd.losses.combined_distill_loss`. The teachers are never modified.
    The best snapshot is chosen by the validation accuracy of the averaged student.
    """
    teachers = list(teachers)
    _check_teachers(teachers, student)
    _check_dims(student, data)
    check_trainable(data)

    perturber = Perturber(perturb_cfg, teachers, rng)
    features, labels = data.train.features, data.train.labels
    logger.info(
        "Distilling %d teachers with strategy=%s eta=%.5g alpha=%.3g tau=%.3g;"
        " snapshots use the ensemble averaged validation accuracy",
        len(teachers),
        perturb_cfg.strategy.value,
        perturb_cfg.eta,
        loss_cfg.alpha,
        loss_cfg.tau,
    )

    def batch_loss(indices):
        x, y = features[indices], labels[indices]
        x_perturbed = perturber.perturb(x, y)
        leaves = student.leaves()
        loss = combined_distill_loss(student, teachers, x, x_perturbed, y, loss_cfg, leaves)
        dc.backward(loss)
        return float(loss.value), {name: leaf.grad for name, leaf in leaves.items()}

    start = time.monotonic()
    log, best_epoch, best_acc = _fit(
        student.parameters,
        batch_loss,
        _student_val_probs(student, data),
        data,
        sched,
        optim,
        rng,
        "student",
    )
    stats = perturber.stats
    result = DistillResult(
        student,
        log,
        best_epoch,
        best_acc,
        time.monotonic() - start,
        perturbed_examples=stats.examples if perturb_cfg.strategy != Strategy.NONE else 0,
        degenerate_count=stats.degenerate,
    )
    if stats.degenerate > 0:
        logger.info(
            "%d of %d examples fell back to the clean input (vanishing gradient)",
            stats.degenerate,
            stats.examples,
        )
    student.training_meta = {
        "role": "distilled",
        "strategy": perturb_cfg.strategy.value,
        "eta": perturb_cfg.eta,
        "alpha": loss_cfg.alpha,
        "tau": loss_cfg.tau,
        **result.summary(),
    }
    logger.info("Distilled student in %s", format_timespan(result.duration))
    return result


def train_student_scratch(
    student: BatchEnsembleStudent,
    data: DataBundle,
    sched: ScheduleConfig,
    optim: OptimConfig,
    seed: int,
) -> TrainResult:
    """Trains all subnetworks with ``sum_j CE(S_j(x), y)`` on shared minibatches, without teachers."""
    _check_dims(student, data)
    check_trainable(data)
    features, labels = data.train.features, data.train.labels

    def batch_loss(indices):
        leaves = student.leaves()
        loss = member_cross_entropy(student, features[indices], labels[indices], leaves)
        dc.backward(loss)
        return float(loss.value), {name: leaf.grad for name, leaf in leaves.items()}

    start = time.monotonic()
    log, best_epoch, best_acc = _fit(
        student.parameters,
        batch_loss,
        _student_val_probs(student, data),
        data,
        sched,
        optim,
        _batch_rng(seed),
        "scratch student",
    )
    result = TrainResult(student, log, best_epoch, best_acc, time.monotonic() - start)
    student.training_meta = {"role": "scratch", **result.summary()}
    logger.info("Trained scratch student in %s", format_timespan(result.duration))
    return result


SWEEP_COLUMNS = ["alpha", "tau", "val_acc", "val_nll", "tau_star", "val_nll_calibrated"]


def sweep_kd_hyperparameters(
    teachers: Sequence[Classifier],
    student_factory: Callable[[], BatchEnsembleStudent],
    data: DataBundle,
    alphas: Sequence[float],
    taus: Sequence[float],
    perturb_cfg: PerturbationConfig,
    sched: ScheduleConfig,
    optim: OptimConfig,
    seed: int,
) -> pd.DataFrame:
    """
    Distills a fresh student for every ``(alpha, tau)`` cell and reports the validation
    accuracy, the validation NLL and the NLL after temperature scaling on the validation split.
    Every cell uses the same seed so only the hyperparameters differ.
    """
    rows = []
    for alpha in alphas:
        for tau in taus:
            loss_cfg = LossConfig(alpha=alpha, tau=tau)
            result = distill(
                teachers,
                student_factory(),
                data,
                loss_cfg,
                perturb_cfg,
                sched,
                optim,
                np.random.default_rng(seed),
            )
            members = result.model.members()
            val_logits = ensemble_logits(member_probs(members, data.val.features))
            batch = PredictionBatch(softmax(val_logits, axis=1), data.val.labels)
            tau_star = fit_temperature(val_logits, data.val.labels)
            calibrated = PredictionBatch(softmax(val_logits / tau_star, axis=1), data.val.labels)
            rows.append(
                {
                    "alpha": alpha,
                    "tau": tau,
                    "val_acc": accuracy(batch),
                    "val_nll": nll(batch),
                    "tau_star": tau_star,
                    "val_nll_calibrated": nll(calibrated),
                }
            )
            logger.info("Sweep alpha=%.3g tau=%.3g: %s", alpha, tau, rows[-1])
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def write_training_log(rows: List[dict], path: PathLike):
    write_csv(pd.DataFrame(rows, columns=LOG_COLUMNS), path)
