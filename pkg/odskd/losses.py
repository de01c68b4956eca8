"""
Cross-entropy, the temperature scaled distillation loss and the one-to-one distillation objective.
All losses reduce over the batch by the mean.
"""
# This code is distributed under the MIT License

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy.special import softmax

from odskd import diffcore as dc
from odskd.diffcore import DiffNode
from odskd.exceptions import ConfigurationError, DomainError, ShapeError, ValidationError
from odskd.models import BatchEnsembleStudent, Classifier

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    alpha: float = 0.9
    """ Weight of the distillation term, in (0, 1]. The cross-entropy term gets ``1 - alpha``. """

    tau: float = 4.0
    """ Softening temperature of the distillation term. """

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise DomainError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")


def check_one_hot(labels: np.ndarray, num_classes: Optional[int] = None):
    """:raises ValidationError: unless every row of `labels` is a one-hot vector."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValidationError(f"Labels must be a [batch x K] one-hot matrix, got shape {labels.shape}")
    if num_classes is not None and labels.shape[1] != num_classes:
        raise ValidationError(f"Labels have {labels.shape[1]} classes, expected {num_classes}")
    binary = np.all((labels == 0) | (labels == 1))
    if not binary or not np.all(labels.sum(axis=1) == 1):
        raise ValidationError("Labels are not one-hot encoded")


def cross_entropy(probs: DiffNode, labels: np.ndarray) -> DiffNode:
    """Mean over the batch of ``-sum_k y_k log p_k``."""
    check_one_hot(labels)
    if probs.shape != labels.shape:
        raise ShapeError(f"Probabilities of shape {probs.shape} and labels of shape {labels.shape}")
    log_likelihood = dc.onehot_dot(dc.log(probs), labels)
    return dc.scale(dc.sum(log_likelihood), -1.0 / probs.shape[0])


def kd_loss(
    student_logits: DiffNode,
    teacher_logits: Union[np.ndarray, DiffNode],
    tau: float,
    detach_teacher: bool = True,
) -> DiffNode:
    """
    Mean over the batch of ``-tau^2 sum_k softmax_k(T/tau) log softmax_k(S/tau)``.

    :param detach_teacher: If `True` (the default) the teacher logits are a constant target and
        no gradient flows into them. Set to `False` only to differentiate the loss as a function
        of inputs that feed both networks.
    """
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    teacher_value = teacher_logits.value if isinstance(teacher_logits, DiffNode) else teacher_logits
    if student_logits.shape != np.shape(teacher_value):
        raise ShapeError(
            f"Student logits of shape {student_logits.shape} and teacher logits of shape {np.shape(teacher_value)}"
        )

    if detach_teacher or not isinstance(teacher_logits, DiffNode):
        target = dc.constant(softmax(np.asarray(teacher_value) / tau, axis=-1))
    else:
        target = dc.softmax_row(teacher_logits, tau)

    log_student = dc.log(dc.softmax_row(student_logits, tau))
    soft_ce = dc.sum(target * log_student)
    return dc.scale(soft_ce, -(tau**2) / student_logits.shape[0])


def _check_members(student: BatchEnsembleStudent, teachers: Sequence[Classifier]):
    if len(teachers) != student.ensemble_size:
        raise ConfigurationError(
            f"{len(teachers)} teachers for a student with {student.ensemble_size} subnetworks"
        )


def combined_distill_loss(
    student: BatchEnsembleStudent,
    teachers: Sequence[Classifier],
    x_clean: np.ndarray,
    x_perturbed: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    leaves: Optional[Dict[str, DiffNode]] = None,
) -> DiffNode:
    """
    One-to-one distillation objective
    ``sum_j (1 - alpha) CE(S_j(x_clean), y) + alpha KD(S_j(x_perturbed), T_j(x_perturbed); tau)``.
    Teacher outputs are constant targets.

    :param leaves: Graph leaves of the student parameters. Pass them to read gradients
        after :func:`odskd.diffcore.backward`.
    """
    _check_members(student, teachers)
    if np.shape(x_clean) != np.shape(x_perturbed):
        raise ShapeError(
            f"Clean inputs of shape {np.shape(x_clean)} and perturbed inputs of shape {np.shape(x_perturbed)}"
        )
    leaves = leaves if leaves is not None else student.leaves()
    clean = dc.constant(x_clean)
    perturbed = clean if x_perturbed is x_clean else dc.constant(x_perturbed)

    total: Optional[DiffNode] = None
    for member, teacher in enumerate(teachers):
        student_clean = student.member_forward(member, clean, leaves)
        student_perturbed = (
            student_clean
            if perturbed is clean
            else student.member_forward(member, perturbed, leaves)
        )
        term = dc.scale(
            kd_loss(student_perturbed, teacher.logits(x_perturbed), cfg.tau), cfg.alpha
        )
        if cfg.alpha < 1:
            ce = cross_entropy(dc.softmax_row(student_clean), labels)
            term = dc.scale(ce, 1.0 - cfg.alpha) + term
        total = term if total is None else total + term
    assert total is not None
    return total


def member_cross_entropy(
    student: BatchEnsembleStudent,
    x: np.ndarray,
    labels: np.ndarray,
    leaves: Optional[Dict[str, DiffNode]] = None,
) -> DiffNode:
    """``sum_j CE(S_j(x), y)``: the objective of a BatchEnsemble trained without teachers."""
    leaves = leaves if leaves is not None else student.leaves()
    inputs = dc.constant(x)
    total: Optional[DiffNode] = None
    for member in range(student.ensemble_size):
        probs = dc.softmax_row(student.member_forward(member, inputs, leaves))
        term = cross_entropy(probs, labels)
        total = term if total is None else total + term
    assert total is not None
    return total
