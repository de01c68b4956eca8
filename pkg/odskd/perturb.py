"""
Input perturbation strategies for distillation: Gaussian noise, output diversified sampling
(ODS), its confidence scaled variant (ConfODS) and a single-step adversarial perturbation.

ODS moves an input along the normalized input gradient of ``w^T softmax(T(x) / tau)`` for a
random guide vector ``w`` drawn uniformly from ``[-1, 1]^K``. Replacing ``w`` with the negated
one-hot label gives a non-targeted adversarial step.

All functions accept a single example (``[D]``) or a batch (``[n x D]``).
"""
# This code is distributed under the MIT License

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from odskd import diffcore as dc
from odskd.exceptions import DegenerateGradient, DomainError, UsageError, ValidationError
from odskd.losses import check_one_hot
from odskd.models import Classifier

logger = logging.getLogger(__name__)

# gradient norms below this are treated as vanishing
MIN_GRADIENT_NORM = 1e-12

# a guide vector: shape [K] (or [n x K] for a batch), entries in [-1, 1]
GuideVector = np.ndarray


class Strategy(str, Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    ODS = "ods"
    CONFODS = "confods"
    ADVERSARIAL = "adversarial"


@dataclass
class PerturbationConfig:
    strategy: Strategy = Strategy.NONE

    eta: float = 1 / 255
    """ Step size. """

    tau: float = 4.0
    """ Temperature used to soften the teacher outputs the direction is computed from. """

    gaussian_sigma: Optional[float] = None
    """ Standard deviation of Gaussian noise. Defaults to `eta`. """

    gaussian_normalize: bool = False
    """ Rescale each Gaussian noise vector to norm `eta`, for step matched comparisons. """

    share_across_batch: bool = False
    """ Draw one teacher index and one guide vector per batch instead of per example. """

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if not self.eta >= 0:
            raise DomainError(f"eta must be nonnegative, got {self.eta}")
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.gaussian_sigma is not None and not self.gaussian_sigma >= 0:
            raise DomainError(f"gaussian_sigma must be nonnegative, got {self.gaussian_sigma}")

    @property
    def sigma(self) -> float:
        return self.eta if self.gaussian_sigma is None else self.gaussian_sigma


def sample_guide(rng: np.random.Generator, num_classes: int, size: Optional[int] = None) -> GuideVector:
    """I.i.d. uniform entries in ``[-1, 1]``; shape ``[K]`` or ``[size x K]``."""
    shape = (num_classes,) if size is None else (size, num_classes)
    return rng.uniform(-1.0, 1.0, size=shape)


def pick_random_teacher(num_teachers: int, rng: np.random.Generator, size: Optional[int] = None):
    """Uniform index in ``{0, ..., num_teachers - 1}`` (or an array of `size` indices)."""
    if num_teachers < 1:
        raise UsageError(f"Need at least one teacher, got {num_teachers}")
    return rng.integers(num_teachers, size=size)


def _as_batch(x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(w, (x.shape[0], w.shape[0]))
    return x, w


def guided_gradients(
    model: Classifier, x: np.ndarray, w: np.ndarray, tau: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-example gradients ``grad_x (w_i^T softmax(logits(x_i) / tau))`` for a batch and the
    softened probabilities at `x`.
    """
    x_node = dc.parameter(x)
    probs = dc.softmax_row(model.forward(x_node, model.leaves(requires_grad=False)), tau)
    if probs.shape != w.shape:
        raise ValidationError(f"Guide vectors of shape {w.shape} for outputs of shape {probs.shape}")
    # examples are independent, so one backward pass yields every row's gradient
    dc.backward(dc.sum(probs * dc.constant(w)))
    return x_node.grad, probs.value


def _directions(model: Classifier, x: np.ndarray, w: np.ndarray, tau: float):
    grads, probs = guided_gradients(model, x, w, tau)
    norms = np.linalg.norm(grads, axis=1)
    degenerate = norms < MIN_GRADIENT_NORM
    safe = np.where(degenerate, 1.0, norms)
    return grads / safe[:, None], degenerate, probs


def ods_direction(model: Classifier, x: np.ndarray, w: GuideVector, tau: float) -> np.ndarray:
    """
    Unit vector ``grad_x(w^T F(x)) / ||grad_x(w^T F(x))||`` with ``F = softmax(logits / tau)``.

    :raises DegenerateGradient: if a gradient norm is below 1e-12; `data` lists the rows.
    """
    single = np.ndim(x) == 1
    x2, w2 = _as_batch(x, w)
    directions, degenerate, _ = _directions(model, x2, w2, tau)
    if np.any(degenerate):
        raise DegenerateGradient(
            "Vanishing output gradient, cannot compute a perturbation direction",
            data=np.flatnonzero(degenerate).tolist(),
        )
    return directions[0] if single else directions


def _check_eta(eta: float):
    if not eta >= 0:
        raise DomainError(f"eta must be nonnegative, got {eta}")


def _guided_step(
    x: np.ndarray,
    model: Classifier,
    w: np.ndarray,
    eta: float,
    tau: float,
    confidence_scaled: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """Perturbed batch and the mask of rows whose gradient vanished (left unperturbed)."""
    directions, degenerate, probs = _directions(model, x, w, tau)
    step = np.full(x.shape[0], eta)
    if confidence_scaled:
        step = step * probs.max(axis=1)
    step = np.where(degenerate, 0.0, step)
    return x + step[:, None] * directions, degenerate


def _guided_perturbation(x, model, w, eta, tau, confidence_scaled):
    _check_eta(eta)
    single = np.ndim(x) == 1
    x2, w2 = _as_batch(x, w)
    if eta == 0:
        return np.array(x, dtype=np.float64)
    perturbed, degenerate = _guided_step(x2, model, w2, eta, tau, confidence_scaled)
    if np.any(degenerate):
        raise DegenerateGradient(
            "Vanishing output gradient, cannot compute a perturbation direction",
            data=np.flatnonzero(degenerate).tolist(),
        )
    return perturbed[0] if single else perturbed


def perturb_ods(x: np.ndarray, teacher: Classifier, w: GuideVector, eta: float, tau: float) -> np.ndarray:
    """``x + eta * ods_direction(teacher, x, w, tau)``."""
    return _guided_perturbation(x, teacher, w, eta, tau, confidence_scaled=False)


def perturb_confods(x: np.ndarray, teacher: Classifier, w: GuideVector, eta: float, tau: float) -> np.ndarray:
    """ODS step scaled by the teacher's maximum softened class probability, ``eta * C_max``."""
    return _guided_perturbation(x, teacher, w, eta, tau, confidence_scaled=True)


def perturb_adversarial(
    x: np.ndarray, teacher: Classifier, labels: np.ndarray, eta: float, tau: float
) -> np.ndarray:
    """ODS step with guide ``-onehot(y)``: a step of length `eta` that lowers the true class probability."""
    labels2 = np.atleast_2d(labels)
    check_one_hot(labels2)
    w = -labels2.astype(np.float64)
    if np.ndim(labels) == 1:
        w = w[0]
    return _guided_perturbation(x, teacher, w, eta, tau, confidence_scaled=False)


def perturb_gaussian(
    x: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
    step_norm: Optional[float] = None,
) -> np.ndarray:
    """
    ``x + eps`` with ``eps ~ N(0, sigma^2 I)``.

    :param step_norm: If given, each noise vector is rescaled to this L2 norm.
    """
    if not sigma >= 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    noise = rng.normal(0.0, 1.0, size=x.shape) * sigma
    if step_norm is not None:
        _check_eta(step_norm)
        noise = rng.normal(0.0, 1.0, size=x.shape) if sigma == 0 else noise
        norms = np.linalg.norm(np.atleast_2d(noise), axis=1, keepdims=True)
        noise = (np.atleast_2d(noise) / np.where(norms == 0, 1.0, norms) * step_norm).reshape(x.shape)
    return x + noise


@dataclass
class PerturbStats:
    batches: int = 0
    examples: int = 0
    degenerate: int = 0
    """ Examples whose gradient vanished and which were used unperturbed. """


class Perturber:
    """
    Applies the configured strategy to minibatches.

    For the gradient guided strategies every example draws a source model index ``r``
    uniformly and a guide vector ``w`` (unless :attr:`PerturbationConfig.share_across_batch`),
    and examples with a vanishing gradient fall back to the unperturbed input.

    :param cfg: The perturbation config.
    :param sources: The models directions are computed from, usually the teachers.
    :param rng: Random generator for teacher indices, guides and noise.
    """

    def __init__(self, cfg: PerturbationConfig, sources: Sequence[Classifier], rng: np.random.Generator):
        self.cfg = cfg
        self.sources = list(sources)
        self.rng = rng
        self.stats = PerturbStats()
        if cfg.strategy not in (Strategy.NONE, Strategy.GAUSSIAN) and len(self.sources) == 0:
            raise UsageError(f"Strategy {cfg.strategy.value} needs at least one source model")

    def _draw(self, n: int, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.cfg.share_across_batch:
            index = pick_random_teacher(len(self.sources), self.rng)
            guide = sample_guide(self.rng, num_classes)
            return np.full(n, index), np.broadcast_to(guide, (n, num_classes))
        indices = pick_random_teacher(len(self.sources), self.rng, size=n)
        return indices, sample_guide(self.rng, num_classes, size=n)

    def perturb(self, x: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
        """Perturbed copy of the batch `x`. `labels` are needed for the adversarial strategy."""
        cfg = self.cfg
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self.stats.batches += 1
        self.stats.examples += x.shape[0]

        if cfg.strategy == Strategy.NONE:
            return x
        if cfg.strategy == Strategy.GAUSSIAN:
            step_norm = cfg.eta if cfg.gaussian_normalize else None
            return perturb_gaussian(x, cfg.sigma, self.rng, step_norm=step_norm)
        if cfg.eta == 0:
            return x.copy()

        num_classes = self.sources[0].num_classes
        indices, guides = self._draw(x.shape[0], num_classes)
        if cfg.strategy == Strategy.ADVERSARIAL:
            if labels is None:
                raise UsageError("The adversarial strategy needs labels")
            check_one_hot(labels, num_classes)
            guides = -np.asarray(labels, dtype=np.float64)

        perturbed = x.copy()
        degenerate_total = 0
        for index in np.unique(indices):
            rows = indices == index
            stepped, degenerate = _guided_step(
                x[rows],
                self.sources[index],
                np.asarray(guides[rows]),
                cfg.eta,
                cfg.tau,
                confidence_scaled=cfg.strategy == Strategy.CONFODS,
            )
            perturbed[rows] = stepped
            degenerate_total += int(np.sum(degenerate))

        if degenerate_total > 0:
            logger.debug("%d examples with vanishing gradient kept unperturbed", degenerate_total)
        self.stats.degenerate += degenerate_total
        return perturbed
