"""
Diagnostics of ensemble diversity and Jacobian matching.

* Diversity plots: the average pairwise KL divergence between member outputs per example,
  binned by the minimum member confidence. ``mean_kld`` is the flat mean over examples.
* Input Jacobians of models and their cosine similarities, compared with ROC curves.
* The signal-to-noise ratio of the gradient part that distillation on perturbed inputs
  adds on top of distillation on clean inputs.
* A first-order Taylor residual check of the distillation loss as a function of the input.
"""
# This code is distributed under the MIT License

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import rel_entr
from sklearn.metrics import roc_auc_score, roc_curve

from odskd import diffcore as dc
from odskd.diffcore import LOG_FLOOR, DiffNode
from odskd.exceptions import ConfigurationError, DegenerateGradient, UsageError, ValidationError
from odskd.losses import kd_loss
from odskd.models import Classifier, member_probs
from odskd.perturb import PerturbationConfig, Perturber, Strategy

logger = logging.getLogger(__name__)

DEFAULT_DIVERSITY_BINS = 20
DEFAULT_SNR_SAMPLES = 64
DEFAULT_SNR_ETAS = (1 / 255, 2 / 255, 4 / 255, 8 / 255)

# DIVERSITY PLOTS


def pairwise_kld(member_probs_: np.ndarray) -> np.ndarray:
    """
    Mean of ``KL(p_i || p_j)`` over all ordered pairs ``i != j`` of members.

    :param member_probs_: ``[M x K]`` for one example or ``[M x N x K]`` for a batch.
    :return: A scalar, or one value per example.
    """
    probs = np.asarray(member_probs_, dtype=np.float64)
    num_members = probs.shape[0]
    if num_members < 2:
        raise UsageError(f"Pairwise KL needs at least two members, got {num_members}")
    # kl[i, j, ...] = KL(p_i || p_j)
    kl = rel_entr(probs[:, None], np.maximum(probs[None, :], LOG_FLOOR)).sum(axis=-1)
    return kl.sum(axis=(0, 1)) / (num_members * (num_members - 1))


def min_confidence(member_probs_: np.ndarray) -> np.ndarray:
    """Minimum over members of the maximum class probability (``[M x K]`` or ``[M x N x K]``)."""
    probs = np.asarray(member_probs_, dtype=np.float64)
    if probs.shape[0] < 1:
        raise UsageError("Need at least one member")
    return probs.max(axis=-1).min(axis=0)


@dataclass
class DiversityPlotData:
    bin_edges: np.ndarray
    """ ``num_bins + 1`` equal width edges on ``[0, 1]``. """

    counts: np.ndarray
    mean_kl: np.ndarray
    """ Mean pairwise KL of the examples in each bin, 0 for empty bins. """

    mean_kld: float
    """ Count weighted average of :attr:`mean_kl`, i.e. the mean over all examples. """

    @property
    def density(self) -> np.ndarray:
        return self.counts / max(int(self.counts.sum()), 1)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "bin_lower": self.bin_edges[:-1],
                "bin_upper": self.bin_edges[1:],
                "count": self.counts,
                "density": self.density,
                "mean_kl": self.mean_kl,
            }
        )


def diversity_plot_from_probs(member_probs_: np.ndarray, num_bins: int = DEFAULT_DIVERSITY_BINS) -> DiversityPlotData:
    """Diversity plot from member outputs ``[M x N x K]``."""
    if num_bins < 1:
        raise ValidationError(f"num_bins must be positive, got {num_bins}")
    probs = np.asarray(member_probs_, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[1] == 0:
        raise UsageError(f"Need member outputs for a nonempty dataset, got shape {probs.shape}")

    kl = pairwise_kld(probs)
    confidence = min_confidence(probs)
    indices = np.clip(np.floor(confidence * num_bins).astype(int), 0, num_bins - 1)
    counts = np.bincount(indices, minlength=num_bins)
    sums = np.bincount(indices, weights=kl, minlength=num_bins)
    mean_kl = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return DiversityPlotData(
        bin_edges=np.linspace(0.0, 1.0, num_bins + 1),
        counts=counts,
        mean_kl=mean_kl,
        mean_kld=float(np.mean(kl)),
    )


def diversity_plot(
    members: Sequence[Classifier], features: np.ndarray, num_bins: int = DEFAULT_DIVERSITY_BINS
) -> DiversityPlotData:
    """Diversity plot of the `members` on the inputs `features` ``[N x D]``."""
    if len(features) == 0:
        raise UsageError("Cannot build a diversity plot of an empty dataset")
    return diversity_plot_from_probs(member_probs(members, features), num_bins)


# JACOBIANS


def jacobian(model: Classifier, x: np.ndarray, tau: float = 1.0, of: str = "probs") -> np.ndarray:
    """
    Input Jacobians ``[n x K x D]`` of ``softmax(logits / tau)`` (``of="probs"``) or of the
    logits (``of="logits"``), by one backward pass per class.
    """
    if of not in ("probs", "logits"):
        raise ValidationError(f"Jacobians are taken of 'probs' or 'logits', not '{of}'")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    leaves = model.leaves(requires_grad=False)
    rows = []
    for k in range(model.num_classes):
        x_node = dc.parameter(x)
        out = model.forward(x_node, leaves)
        if of == "probs":
            out = dc.softmax_row(out, tau)
        selector = np.zeros(out.shape)
        selector[:, k] = 1.0
        # examples are independent: the gradient of the column sum holds every row's gradient
        dc.backward(dc.sum(dc.onehot_dot(out, selector)))
        rows.append(x_node.grad)
    return np.stack(rows, axis=1)


def _check_compatible(model_a: Classifier, model_b: Classifier):
    if model_a.input_dim != model_b.input_dim or model_a.num_classes != model_b.num_classes:
        raise ConfigurationError(
            f"Models map {model_a.input_dim} -> {model_a.num_classes}"
            f" and {model_b.input_dim} -> {model_b.num_classes}"
        )


def jacobian_cosine(model_a: Classifier, model_b: Classifier, x: np.ndarray, of: str = "probs"):
    """
    Cosine similarity of the vectorized ``K x D`` input Jacobians of two models at `x`.
    Returns a scalar for a single input ``[D]`` and one value per row for a batch.

    :raises DegenerateGradient: if a Jacobian is zero.
    """
    _check_compatible(model_a, model_b)
    single = np.ndim(x) == 1
    jac_a = jacobian(model_a, x, of=of).reshape(np.atleast_2d(x).shape[0], -1)
    jac_b = jacobian(model_b, x, of=of).reshape(jac_a.shape)
    norms = np.linalg.norm(jac_a, axis=1) * np.linalg.norm(jac_b, axis=1)
    if np.any(norms == 0):
        raise DegenerateGradient(
            "Zero Jacobian, cosine similarity undefined", data=np.flatnonzero(norms == 0).tolist()
        )
    cosines = np.clip(np.sum(jac_a * jac_b, axis=1) / norms, -1.0, 1.0)
    return float(cosines[0]) if single else cosines


@dataclass
class RocData:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float
    mean_positive: float
    mean_negative: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})

    def summary(self) -> dict:
        return {
            "auroc": self.auroc,
            "mean_cos_positive": self.mean_positive,
            "mean_cos_negative": self.mean_negative,
        }


def roc_auroc(positives: Sequence[float], negatives: Sequence[float]) -> RocData:
    """
    ROC over every threshold of the pooled values, with `positives` as the positive class.
    The AUROC is ``P(pos > neg) + P(pos = neg) / 2``.
    """
    positives = np.asarray(positives, dtype=np.float64).ravel()
    negatives = np.asarray(negatives, dtype=np.float64).ravel()
    if len(positives) == 0 or len(negatives) == 0:
        raise UsageError("ROC needs nonempty positive and negative samples")
    scores = np.concatenate([positives, negatives])
    truth = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    fpr, tpr, thresholds = roc_curve(truth, scores, drop_intermediate=False)
    return RocData(
        thresholds=thresholds,
        fpr=fpr,
        tpr=tpr,
        auroc=float(roc_auc_score(truth, scores)),
        mean_positive=float(np.mean(positives)),
        mean_negative=float(np.mean(negatives)),
    )


# JACOBIAN MATCHING


def _flat_kd_gradient(teacher: Classifier, student: Classifier, x: np.ndarray, tau: float) -> np.ndarray:
    leaves = student.leaves()
    loss = kd_loss(student.forward(dc.constant(x), leaves), teacher.logits(x), tau)
    dc.backward(loss)
    return np.concatenate([leaves[name].grad.ravel() for name in sorted(leaves)])


def jacobian_matching_snr(
    teacher: Classifier,
    student: Classifier,
    x: np.ndarray,
    perturber: Callable[[np.ndarray], np.ndarray],
    n_samples: int = DEFAULT_SNR_SAMPLES,
    tau: float = 4.0,
) -> float:
    """
    Draws `n_samples` perturbed batches ``x + eps`` and returns ``||mean G|| / sqrt(||var G||)`` of
    ``G = grad_theta (L_KD(S(x + eps), T(x + eps)) - L_KD(S(x), T(x)))`` over the student
    parameters, with the elementwise variance.

    Returns ``math.inf`` (and warns) if the variance vanishes.
    """
    if n_samples < 2:
        raise ValidationError(f"Need at least two samples, got {n_samples}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    clean = _flat_kd_gradient(teacher, student, x, tau)
    samples = np.stack(
        [_flat_kd_gradient(teacher, student, perturber(x), tau) - clean for _ in range(n_samples)]
    )
    variance_norm = float(np.linalg.norm(samples.var(axis=0)))
    mean_norm = float(np.linalg.norm(samples.mean(axis=0)))
    if variance_norm == 0:
        logger.warning("Zero gradient variance over %d perturbations, SNR is infinite", n_samples)
        return math.inf
    return mean_norm / math.sqrt(variance_norm)


def snr_table(
    teacher: Classifier,
    student: Classifier,
    x: np.ndarray,
    etas: Sequence[float] = DEFAULT_SNR_ETAS,
    n_samples: int = DEFAULT_SNR_SAMPLES,
    rng: Optional[np.random.Generator] = None,
    tau: float = 4.0,
) -> pd.DataFrame:
    """
    SNR of Gaussian perturbations (rescaled to norm eta) and of ODS perturbations computed
    from `teacher`, for every step size.
    """
    rng = rng if rng is not None else np.random.default_rng()
    rows = []
    for eta in etas:
        row: Dict[str, float] = {"eta": eta}
        for strategy, cfg in (
            ("gaussian", PerturbationConfig(Strategy.GAUSSIAN, eta=eta, gaussian_normalize=True)),
            ("ods", PerturbationConfig(Strategy.ODS, eta=eta, tau=tau)),
        ):
            perturber = Perturber(cfg, [teacher], rng)
            row[f"snr_{strategy}"] = jacobian_matching_snr(
                teacher, student, x, perturber.perturb, n_samples, tau
            )
        logger.info("SNR at eta=%.5g: gaussian=%.5g ods=%.5g", eta, row["snr_gaussian"], row["snr_ods"])
        rows.append(row)
    return pd.DataFrame(rows, columns=["eta", "snr_gaussian", "snr_ods"])


PairLoss = Callable[[DiffNode, DiffNode], DiffNode]


def jacobian_matching_residual(
    teacher: Classifier,
    student: Classifier,
    x: np.ndarray,
    direction: np.ndarray,
    eta_list: Sequence[float],
    tau: float = 4.0,
    loss_fn: Optional[PairLoss] = None,
) -> List[float]:
    """
    Residuals ``|L(x + eta d) - L(x) - eta d^T grad_x L(x)|`` of the first-order Taylor expansion
    of ``L(x) = L_KD(S(x), T(x))`` in direction `d`, where the input feeds both networks.
    For smooth instances they decay quadratically in eta.

    :param loss_fn: Replaces the distillation loss, called with the student and teacher logits.
    """
    if any(eta < 0 for eta in eta_list):
        raise ValidationError(f"Step sizes must be nonnegative, got {list(eta_list)}")
    loss_fn = loss_fn if loss_fn is not None else (lambda s, t: kd_loss(s, t, tau, detach_teacher=False))
    student_leaves = student.leaves(requires_grad=False)
    teacher_leaves = teacher.leaves(requires_grad=False)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    direction = np.asarray(direction, dtype=np.float64).reshape(x.shape)

    def loss_at(inputs: DiffNode) -> DiffNode:
        return loss_fn(student.forward(inputs, student_leaves), teacher.forward(inputs, teacher_leaves))

    x_node = dc.parameter(x)
    base = loss_at(x_node)
    dc.backward(base)
    slope = float(np.sum(direction * x_node.grad))
    return [
        abs(float(loss_at(dc.constant(x + eta * direction)).value) - float(base.value) - eta * slope)
        for eta in eta_list
    ]


def residual_slope(eta_list: Sequence[float], residuals: Sequence[float]) -> float:
    """Least squares slope of ``log residual`` over ``log eta``."""
    return float(np.polyfit(np.log(eta_list), np.log(residuals), 1)[0])

