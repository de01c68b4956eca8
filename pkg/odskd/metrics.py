"""
Standard and calibrated evaluation metrics.

All logarithms are natural. Probabilities are clamped at 1e-300 before taking logarithms.
Calibrated metrics follow the usual order: fit a temperature on validation logits, then
evaluate the test logits divided by that temperature.
"""
# This code is distributed under the MIT License

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax, softmax
from scipy.stats import entropy as scipy_entropy

from odskd.artifacts import PathLike, tool_version, write_json
from odskd.diffcore import LOG_FLOOR
from odskd.exceptions import UsageError, ValidationError
from odskd.losses import check_one_hot

logger = logging.getLogger(__name__)

DEFAULT_ECE_BINS = 15
TEMPERATURE_BOUNDS = (0.05, 5.0)
TEMPERATURE_GRID_POINTS = 100
TEMPERATURE_TOL = 1e-5

METRIC_KEYS = ("acc", "nll", "brier", "ece", "entropy_mean")


@dataclass
class PredictionBatch:
    probs: np.ndarray
    """ Probability rows ``[N x K]``. """

    labels: np.ndarray
    """ One-hot labels ``[N x K]``. """

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.probs.ndim != 2 or self.probs.shape[0] < 1:
            raise ValidationError(f"Need a nonempty [N x K] probability matrix, got {self.probs.shape}")
        if self.probs.shape != self.labels.shape:
            raise ValidationError(
                f"Probabilities of shape {self.probs.shape} and labels of shape {self.labels.shape}"
            )
        check_one_hot(self.labels)
        if not np.allclose(self.probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValidationError("Probability rows must sum to 1")

    @property
    def num_examples(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def correct(self) -> np.ndarray:
        # argmax breaks ties towards the lowest class index
        return np.argmax(self.probs, axis=1) == np.argmax(self.labels, axis=1)


def accuracy(batch: PredictionBatch) -> float:
    return float(np.mean(batch.correct))


def nll(batch: PredictionBatch) -> float:
    true_probs = np.sum(batch.probs * batch.labels, axis=1)
    return float(-np.mean(np.log(np.maximum(true_probs, LOG_FLOOR))))


def brier(batch: PredictionBatch) -> float:
    """Mean over examples of ``(1/K) sum_k (p_k - y_k)^2``."""
    return float(np.mean(np.sum((batch.probs - batch.labels) ** 2, axis=1) / batch.num_classes))


def _bin_indices(values: np.ndarray, num_bins: int) -> np.ndarray:
    """Equal width bins on ``(0, 1]``; bin ``l`` holds ``(l / L, (l + 1) / L]``."""
    return np.clip(np.ceil(values * num_bins).astype(int) - 1, 0, num_bins - 1)


def reliability_bins(batch: PredictionBatch, num_bins: int = DEFAULT_ECE_BINS) -> pd.DataFrame:
    """Per confidence bin: edges, count, accuracy and mean confidence (NaN for empty bins)."""
    if num_bins < 1:
        raise ValidationError(f"num_bins must be positive, got {num_bins}")
    confidences = batch.confidences
    correct = batch.correct.astype(np.float64)
    indices = _bin_indices(confidences, num_bins)
    counts = np.bincount(indices, minlength=num_bins)
    safe = np.maximum(counts, 1)
    acc = np.where(counts > 0, np.bincount(indices, weights=correct, minlength=num_bins) / safe, np.nan)
    conf = np.where(
        counts > 0, np.bincount(indices, weights=confidences, minlength=num_bins) / safe, np.nan
    )
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    return pd.DataFrame(
        {
            "bin_lower": edges[:-1],
            "bin_upper": edges[1:],
            "count": counts,
            "accuracy": acc,
            "confidence": conf,
        }
    )


def ece(batch: PredictionBatch, num_bins: int = DEFAULT_ECE_BINS) -> float:
    """``sum_l |B_l| / N * |acc(B_l) - conf(B_l)|``; empty bins contribute nothing."""
    bins = reliability_bins(batch, num_bins)
    nonempty = bins[bins["count"] > 0]
    gaps = np.abs(nonempty["accuracy"] - nonempty["confidence"])
    return float(np.sum(nonempty["count"] * gaps) / batch.num_examples)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """``-sum_k p_k log p_k`` of a row (or of every row), with ``0 log 0 = 0``."""
    return scipy_entropy(np.asarray(probs, dtype=np.float64), axis=-1)


def entropy_histogram(probs: np.ndarray, num_bins: int = 20) -> pd.DataFrame:
    """Histogram of per-example predictive entropy on ``[0, ln K]``."""
    probs = np.atleast_2d(probs)
    max_entropy = math.log(probs.shape[1])
    values = np.clip(predictive_entropy(probs), 0.0, max_entropy)
    counts, edges = np.histogram(values, bins=num_bins, range=(0.0, max_entropy))
    return pd.DataFrame(
        {
            "bin_lower": edges[:-1],
            "bin_upper": edges[1:],
            "count": counts,
            "density": counts / max(len(values), 1),
        }
    )


def ensemble_logits(member_probs: np.ndarray) -> np.ndarray:
    """Logarithm of the member averaged probabilities, from ``[M x N x K]`` member outputs."""
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim != 3 or member_probs.shape[0] < 1:
        raise UsageError(f"Need member outputs of shape [M x N x K], M >= 1, got {member_probs.shape}")
    return np.log(np.maximum(member_probs.mean(axis=0), LOG_FLOOR))


def _tempered_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    log_probs = np.maximum(log_softmax(logits / temperature, axis=1), math.log(LOG_FLOOR))
    return float(-np.mean(np.sum(labels * log_probs, axis=1)))


def fit_temperature(
    val_logits: np.ndarray,
    val_labels: np.ndarray,
    bounds: Tuple[float, float] = TEMPERATURE_BOUNDS,
) -> float:
    """
    The temperature in `bounds` that minimizes the NLL of ``softmax(logits / t)``.

    A 100 point grid brackets the minimum, golden section search refines it (bounded Brent
    search if the minimum is at the edge of the grid). The result never has a higher NLL than
    ``t = 1``.
    """
    val_logits = np.atleast_2d(np.asarray(val_logits, dtype=np.float64))
    check_one_hot(val_labels, val_logits.shape[1])

    def objective(t):
        return _tempered_nll(val_logits, val_labels, t)

    grid = np.linspace(bounds[0], bounds[1], TEMPERATURE_GRID_POINTS)
    values = np.array([objective(t) for t in grid])
    best = int(np.argmin(values))

    if 0 < best < len(grid) - 1:
        try:
            refined = minimize_scalar(
                objective,
                bracket=(grid[best - 1], grid[best], grid[best + 1]),
                method="golden",
                tol=TEMPERATURE_TOL,
            )
        except ValueError:
            # flat neighborhood, no valid bracket
            refined = minimize_scalar(
                objective,
                bounds=(grid[best - 1], grid[best + 1]),
                method="bounded",
                options={"xatol": TEMPERATURE_TOL},
            )
    else:
        neighbor = 1 if best == 0 else best - 1
        low, high = sorted((grid[best], grid[neighbor]))
        refined = minimize_scalar(
            objective, bounds=(low, high), method="bounded", options={"xatol": TEMPERATURE_TOL}
        )

    candidates = [float(np.clip(refined.x, *bounds)), float(grid[best]), 1.0]
    # ties go to the smaller temperature, the objective is flat where log_softmax underflows to 0
    tau_star = min(candidates, key=lambda t: (objective(t), t))
    logger.debug("Fitted temperature %.6g (NLL %.6g, at t=1: %.6g)", tau_star, objective(tau_star), objective(1.0))
    return tau_star


@dataclass
class NllCurve:
    sizes: List[int]
    """ Ensemble sizes, strictly increasing. """

    nlls: List[float]

    def __post_init__(self):
        self.sizes = [int(size) for size in self.sizes]
        self.nlls = [float(value) for value in self.nlls]
        if len(self.sizes) != len(self.nlls):
            raise ValidationError(f"{len(self.sizes)} sizes for {len(self.nlls)} NLL values")
        if any(size < 1 for size in self.sizes) or any(
            b <= a for a, b in zip(self.sizes, self.sizes[1:])
        ):
            raise ValidationError(f"Ensemble sizes must be positive and increasing, got {self.sizes}")

    @classmethod
    def from_points(cls, points: Dict[int, float]) -> NllCurve:
        sizes = sorted(points)
        return cls(sizes, [points[size] for size in sizes])

    def lower_envelope(self) -> np.ndarray:
        """Running minimum of the NLL values. Warns if the curve is not monotone."""
        nlls = np.asarray(self.nlls)
        envelope = np.minimum.accumulate(nlls)
        if np.any(envelope < nlls):
            logger.warning("NLL curve %s is not monotonically decreasing, using its lower envelope", self.nlls)
        return envelope

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "nlls": self.nlls}


def dee(model_nll: float, curve: NllCurve) -> float:
    """
    Deep ensemble equivalent: the (linearly interpolated) smallest ensemble size whose NLL
    is not higher than `model_nll`.

    Returns the smallest size of the curve if `model_nll` is not better than it and
    ``math.inf`` if `model_nll` is better than the largest ensemble.
    """
    if len(curve.sizes) < 2:
        raise ValidationError("A DEE curve needs at least two ensemble sizes")
    envelope = curve.lower_envelope()
    if model_nll >= envelope[0]:
        return float(curve.sizes[0])
    if model_nll < envelope[-1]:
        return math.inf

    upper = int(np.argmax(envelope <= model_nll))
    nll_left, nll_right = envelope[upper - 1], envelope[upper]
    size_left, size_right = curve.sizes[upper - 1], curve.sizes[upper]
    fraction = (nll_left - model_nll) / (nll_left - nll_right)
    return float(size_left + fraction * (size_right - size_left))


def _subsets(num_members: int, size: int, subsets: int, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    if math.comb(num_members, size) <= subsets:
        return list(itertools.combinations(range(num_members), size))
    return [tuple(sorted(rng.choice(num_members, size=size, replace=False))) for _ in range(subsets)]


def nll_curve(
    member_probs: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    subsets: int = 3,
    val_member_probs: Optional[np.ndarray] = None,
    val_labels: Optional[np.ndarray] = None,
) -> NllCurve:
    """
    NLL of ensembles of size ``1..M`` formed from the members, averaged over `subsets` random
    member subsets per size (all subsets when there are fewer).

    If validation outputs are given, every sub-ensemble is temperature scaled on them first.
    """
    member_probs = np.asarray(member_probs, dtype=np.float64)
    num_members = member_probs.shape[0]
    calibrate = val_member_probs is not None and val_labels is not None
    sizes, nlls = [], []
    for size in range(1, num_members + 1):
        values = []
        for subset in _subsets(num_members, size, subsets, rng):
            logits = ensemble_logits(member_probs[list(subset)])
            temperature = 1.0
            if calibrate:
                val_logits = ensemble_logits(np.asarray(val_member_probs)[list(subset)])
                temperature = fit_temperature(val_logits, val_labels)
            values.append(nll(PredictionBatch(softmax(logits / temperature, axis=1), labels)))
        sizes.append(size)
        nlls.append(float(np.mean(values)))
    return NllCurve(sizes, nlls)


def evaluate_probs(probs: np.ndarray, labels: np.ndarray, num_bins: int = DEFAULT_ECE_BINS) -> Dict[str, float]:
    batch = PredictionBatch(probs, labels)
    return {
        "acc": accuracy(batch),
        "nll": nll(batch),
        "brier": brier(batch),
        "ece": ece(batch, num_bins),
        "entropy_mean": float(np.mean(predictive_entropy(batch.probs))),
    }


def evaluate_members(
    member_probs: np.ndarray, labels: np.ndarray, num_bins: int = DEFAULT_ECE_BINS
) -> List[Dict[str, float]]:
    """Standard metrics of every single member (or subnetwork)."""
    return [evaluate_probs(probs, labels, num_bins) for probs in member_probs]


def calibrated_report(
    val_logits: np.ndarray,
    val_labels: np.ndarray,
    test_logits: np.ndarray,
    test_labels: np.ndarray,
    num_bins: int = DEFAULT_ECE_BINS,
) -> Tuple[Dict[str, float], Dict[str, float], float]:
    """Standard and temperature scaled test metrics, and the temperature fitted on validation."""
    tau_star = fit_temperature(val_logits, val_labels)
    standard = evaluate_probs(softmax(test_logits, axis=1), test_labels, num_bins)
    calibrated = evaluate_probs(softmax(test_logits / tau_star, axis=1), test_labels, num_bins)
    return standard, calibrated, tau_star


@dataclass
class MetricsReport:
    """
    Evaluation result of one model. The top level metrics are the calibrated ones,
    ``standard`` and ``calibrated`` hold the full blocks.
    """

    standard: Dict[str, float]
    calibrated: Dict[str, float]
    tau_star: float
    num_bins: int = DEFAULT_ECE_BINS
    members: List[Dict[str, float]] = field(default_factory=list)
    reliability: List[dict] = field(default_factory=list)
    entropy_histogram: List[dict] = field(default_factory=list)
    ood: Optional[Dict[str, object]] = None
    dee_curve: Optional[Dict[str, NllCurve]] = None
    config_echo: dict = field(default_factory=dict)

    def add_dee(self, standard_curve: NllCurve, calibrated_curve: NllCurve):
        self.dee_curve = {"standard": standard_curve, "calibrated": calibrated_curve}
        self.standard["dee"] = dee(self.standard["nll"], standard_curve)
        self.calibrated["dee"] = dee(self.calibrated["nll"], calibrated_curve)

    def to_dict(self) -> dict:
        content: Dict[str, object] = {key: self.calibrated[key] for key in METRIC_KEYS}
        content.update(
            {
                "tau_star": self.tau_star,
                "dee": self.calibrated.get("dee"),
                "standard": self.standard,
                "calibrated": self.calibrated,
                "ece_bins": self.num_bins,
                "members": self.members,
                "reliability": self.reliability,
                "entropy_histogram": self.entropy_histogram,
                "config_echo": self.config_echo,
                "version": tool_version(),
            }
        )
        if self.dee_curve is not None:
            content["dee_curve"] = {name: curve.to_dict() for name, curve in self.dee_curve.items()}
        if self.ood is not None:
            content["ood"] = self.ood
        return content

    def save(self, path: PathLike):
        write_json(path, self.to_dict())
        logger.info("Wrote metrics report to %s", path)


def build_report(
    val_member_probs: np.ndarray,
    val_labels: np.ndarray,
    test_member_probs: np.ndarray,
    test_labels: np.ndarray,
    num_bins: int = DEFAULT_ECE_BINS,
    ood_member_probs: Optional[np.ndarray] = None,
    config_echo: Optional[dict] = None,
) -> MetricsReport:
    """
    Full report of an ensemble (or a single model with ``M = 1``) from member outputs ``[M x N x K]``.
    """
    val_logits = ensemble_logits(val_member_probs)
    test_logits = ensemble_logits(test_member_probs)
    standard, calibrated, tau_star = calibrated_report(
        val_logits, val_labels, test_logits, test_labels, num_bins
    )
    test_batch = PredictionBatch(softmax(test_logits / tau_star, axis=1), test_labels)
    report = MetricsReport(
        standard,
        calibrated,
        tau_star,
        num_bins=num_bins,
        members=evaluate_members(test_member_probs, test_labels, num_bins) if len(test_member_probs) > 1 else [],
        reliability=reliability_bins(test_batch, num_bins).to_dict(orient="records"),
        entropy_histogram=entropy_histogram(softmax(test_logits, axis=1)).to_dict(orient="records"),
        config_echo=config_echo if config_echo is not None else {},
    )
    if ood_member_probs is not None:
        ood_probs = softmax(ensemble_logits(ood_member_probs), axis=1)
        report.ood = {
            "entropy_mean": float(np.mean(predictive_entropy(ood_probs))),
            "test_entropy_mean": standard["entropy_mean"],
            "entropy_histogram": entropy_histogram(ood_probs).to_dict(orient="records"),
        }
    return report

