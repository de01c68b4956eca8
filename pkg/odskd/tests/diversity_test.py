# pylint: disable=redefined-outer-name
import logging
import math

import numpy as np
import pytest
from pytest_cases import parametrize
from scipy.special import softmax
from scipy.stats import entropy

from odskd import diffcore as dc
from odskd.diversity import (
    DEFAULT_SNR_ETAS,
    diversity_plot,
    diversity_plot_from_probs,
    jacobian,
    jacobian_cosine,
    jacobian_matching_residual,
    jacobian_matching_snr,
    min_confidence,
    pairwise_kld,
    residual_slope,
    roc_auroc,
    snr_table,
)
from odskd.exceptions import ConfigurationError, DegenerateGradient, UsageError, ValidationError
from odskd.models import MlpTeacher, member_probs
from odskd.test_env import central_difference

TAYLOR_ETAS = [1e-3, 2e-3, 4e-3, 8e-3]


def _kld_oracle(probs):
    m = len(probs)
    return sum(entropy(probs[i], probs[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))


def test_pairwise_kld_oracle(rng):
    probs = softmax(rng.normal(size=(4, 5)), axis=1)
    assert pairwise_kld(probs) == pytest.approx(_kld_oracle(probs), abs=1e-12)
    batch = softmax(rng.normal(size=(3, 6, 4)), axis=2)
    expected = [_kld_oracle(batch[:, n]) for n in range(6)]
    assert np.allclose(pairwise_kld(batch), expected, atol=1e-12, rtol=0)


def test_pairwise_kld_identical_members():
    probs = np.tile([0.2, 0.3, 0.5], (3, 1))
    assert pairwise_kld(probs) == 0.0


def test_pairwise_kld_needs_two_members():
    with pytest.raises(UsageError):
        pairwise_kld(np.array([[0.5, 0.5]]))


def test_min_confidence():
    probs = np.array([[[0.9, 0.1], [0.6, 0.4]], [[0.7, 0.3], [0.2, 0.8]]])
    assert np.allclose(min_confidence(probs), [0.7, 0.6])


def test_diversity_plot_mean(rng):
    probs = softmax(rng.normal(size=(4, 200, 3)) * 2, axis=2)
    plot = diversity_plot_from_probs(probs, num_bins=10)
    assert plot.counts.sum() == 200
    assert plot.mean_kld == pytest.approx(float(np.mean(pairwise_kld(probs))), abs=1e-12)
    assert np.sum(plot.counts * plot.mean_kl) / 200 == pytest.approx(plot.mean_kld, abs=1e-12)
    assert plot.density.sum() == pytest.approx(1.0)
    # min confidence is at least 1 / K
    assert plot.counts[:3].sum() == 0


def test_diversity_plot_of_models(teachers, blobs):
    plot = diversity_plot(list(teachers), blobs.train.features, num_bins=5)
    frame = plot.to_frame()
    assert list(frame.columns) == ["bin_lower", "bin_upper", "count", "density", "mean_kl"]
    assert len(frame) == 5
    assert plot.mean_kld > 0


def test_diversity_plot_errors(teachers):
    with pytest.raises(UsageError):
        diversity_plot(list(teachers), np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        diversity_plot_from_probs(np.full((2, 3, 2), 0.5), num_bins=0)


@parametrize("of", ["probs", "logits"])
def test_jacobian_matches_finite_differences(teacher, rng, of):
    x = rng.normal(size=(3, 2))
    jac = jacobian(teacher, x, of=of)
    assert jac.shape == (3, 3, 2)

    def output(v, row, k):
        values = teacher.predict_proba(v[None]) if of == "probs" else teacher.logits(v[None])
        return float(values[0, k])

    for row in range(3):
        for k in range(3):
            numeric = central_difference(lambda v, row=row, k=k: output(v, row, k), x[row])
            assert np.allclose(jac[row, k], numeric, atol=1e-7)


def test_jacobian_rejects_unknown_output(teacher):
    with pytest.raises(ValidationError):
        jacobian(teacher, np.zeros(2), of="loss")


def test_jacobian_cosine(teacher, student, rng):
    x = rng.normal(size=(5, 2))
    assert np.allclose(jacobian_cosine(teacher, teacher, x), 1.0)
    member = student.members()[1]
    cosines = jacobian_cosine(teacher, member, x)
    assert cosines.shape == (5,)
    assert np.all(np.abs(cosines) <= 1.0)
    assert jacobian_cosine(teacher, member, x[2]) == pytest.approx(cosines[2])


def test_jacobian_cosine_errors(teacher, rng):
    with pytest.raises(ConfigurationError):
        jacobian_cosine(teacher, MlpTeacher.initialize([2, 4, 5], seed=0), rng.normal(size=(2, 2)))
    flat = MlpTeacher.initialize([2, 4, 3], seed=0)
    flat.parameters["W0"][...] = 0.0
    with pytest.raises(DegenerateGradient):
        jacobian_cosine(teacher, flat, rng.normal(size=(2, 2)))


def _mann_whitney(positives, negatives):
    wins = sum((p > n) + 0.5 * (p == n) for p in positives for n in negatives)
    return wins / (len(positives) * len(negatives))


def test_auroc_matches_mann_whitney(rng):
    for _ in range(20):
        positives = rng.integers(0, 6, size=rng.integers(1, 15)) / 5
        negatives = rng.integers(0, 6, size=rng.integers(1, 15)) / 5 - 0.1
        roc = roc_auroc(positives, negatives)
        assert abs(roc.auroc - _mann_whitney(positives, negatives)) < 1e-12


def test_roc_curve_shape():
    roc = roc_auroc([0.9, 0.8, 0.7], [0.1, 0.2])
    assert roc.auroc == 1.0
    frame = roc.to_frame()
    assert list(frame.columns) == ["threshold", "fpr", "tpr"]
    assert frame["fpr"].iloc[0] == 0.0 and frame["tpr"].iloc[-1] == 1.0
    assert roc.summary()["mean_cos_positive"] == pytest.approx(0.8)
    with pytest.raises(UsageError):
        roc_auroc([], [0.1])


def test_snr_without_noise_is_infinite(teacher, student, rng, caplog):
    x = rng.normal(size=(4, 2))
    with caplog.at_level(logging.WARNING, logger="odskd.diversity"):
        snr = jacobian_matching_snr(teacher, student.members()[0], x, lambda v: v + 0.01, n_samples=3)
    assert snr == math.inf
    assert "infinite" in caplog.text
    with pytest.raises(ValidationError):
        jacobian_matching_snr(teacher, student.members()[0], x, lambda v: v, n_samples=1)


def test_snr_table(trained_teachers, student, blobs):
    table = snr_table(
        trained_teachers[0],
        student.members()[0],
        blobs.train.features[:8],
        etas=DEFAULT_SNR_ETAS[:2],
        n_samples=4,
        rng=np.random.default_rng(0),
    )
    assert list(table.columns) == ["eta", "snr_gaussian", "snr_ods"]
    assert len(table) == 2
    assert (table[["snr_gaussian", "snr_ods"]] > 0).all().all()


def _crosses_relu_kink(model, x, step):
    """Whether a hidden unit of a one hidden layer MLP changes sign between `x` and `x + step`."""
    before = x @ model.parameters["W0"] + model.parameters["b0"]
    after = (x + step) @ model.parameters["W0"] + model.parameters["b0"]
    return bool(np.any(np.sign(before) != np.sign(after)))


def test_taylor_residual_decays_quadratically(trained_teachers, rng):
    instances = 0
    while instances < 20:
        teacher = trained_teachers[instances % 3]
        student = trained_teachers[(instances + 1) % 3]
        x = rng.uniform(-2.5, 2.5, size=(1, 2))
        direction = rng.normal(size=(1, 2))
        direction /= np.linalg.norm(direction)
        # the expansion only holds within one linear region of both networks
        if any(_crosses_relu_kink(model, x, TAYLOR_ETAS[-1] * direction) for model in (teacher, student)):
            continue
        residuals = jacobian_matching_residual(teacher, student, x, direction, TAYLOR_ETAS)
        assert abs(residual_slope(TAYLOR_ETAS, residuals) - 2.0) < 0.3
        instances += 1


def test_taylor_residual_custom_loss(teacher, rng):
    x = rng.normal(size=(2, 2))

    def linear_loss(student_logits, teacher_logits):
        return dc.sum(dc.add(student_logits, teacher_logits))

    relu_free = MlpTeacher.initialize([2, 3], seed=1)
    residuals = jacobian_matching_residual(relu_free, relu_free, x, np.ones((2, 2)), [0.1, 0.2], loss_fn=linear_loss)
    assert np.allclose(residuals, 0.0, atol=1e-12)
    with pytest.raises(ValidationError):
        jacobian_matching_residual(teacher, teacher, x, np.ones((2, 2)), [-0.1])


def test_member_probs_shape(teachers, blobs):
    assert member_probs(list(teachers), blobs.val.features).shape == (3, blobs.val.num_examples, 3)
