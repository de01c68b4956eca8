# pylint: disable=redefined-outer-name
import numpy as np
import pytest
from pytest_cases import parametrize

from odskd.exceptions import DegenerateGradient, DomainError, UsageError
from odskd.models import MlpTeacher
from odskd.perturb import (
    PerturbationConfig,
    Perturber,
    Strategy,
    guided_gradients,
    ods_direction,
    perturb_adversarial,
    perturb_confods,
    perturb_gaussian,
    perturb_ods,
    pick_random_teacher,
    sample_guide,
)
from odskd.test_env import central_difference

STEP_TOLERANCE = 1e-8


@pytest.fixture
def zero_teacher():
    """A teacher whose output does not depend on the input."""
    model = MlpTeacher.initialize([2, 4, 3], seed=0)
    model.parameters["W0"][...] = 0.0
    return model


def test_sample_guide_range(rng):
    guides = sample_guide(rng, 5, size=1000)
    assert guides.shape == (1000, 5)
    assert guides.min() >= -1.0 and guides.max() <= 1.0
    assert sample_guide(rng, 5).shape == (5,)


def test_sample_guide_is_centered(rng):
    means = sample_guide(rng, 6, size=10_000).mean(axis=0)
    assert np.all(np.abs(means) <= 0.05)
    assert np.array_equal(sample_guide(np.random.default_rng(2), 4), sample_guide(np.random.default_rng(2), 4))


def test_pick_random_teacher(rng):
    indices = pick_random_teacher(4, rng, size=400)
    assert set(np.unique(indices)) == {0, 1, 2, 3}
    frequencies = np.bincount(pick_random_teacher(4, rng, size=10_000), minlength=4) / 10_000
    assert np.all((frequencies >= 0.22) & (frequencies <= 0.28))
    with pytest.raises(UsageError):
        pick_random_teacher(0, rng)


def test_guided_gradient_matches_finite_differences(teacher, rng):
    x = rng.normal(size=(3, 2))
    w = sample_guide(rng, 3, size=3)
    grads, _ = guided_gradients(teacher, x, w, 4.0)
    for row in range(3):
        numeric = central_difference(
            lambda v, row=row: float(w[row] @ teacher.predict_proba(v, 4.0)[0]), x[row]
        )
        assert np.allclose(grads[row], numeric, atol=1e-7)


def test_ods_step_norm(teacher, rng):
    x = rng.normal(size=(20, 2))
    w = sample_guide(rng, 3, size=20)
    eta = 0.02
    steps = np.linalg.norm(perturb_ods(x, teacher, w, eta, 4.0) - x, axis=1)
    assert np.all(np.abs(steps - eta) < STEP_TOLERANCE)


def test_ods_single_example(teacher, rng):
    x = rng.normal(size=2)
    w = sample_guide(rng, 3)
    perturbed = perturb_ods(x, teacher, w, 0.05, 1.0)
    assert perturbed.shape == (2,)
    assert abs(np.linalg.norm(perturbed - x) - 0.05) < STEP_TOLERANCE
    assert abs(np.linalg.norm(ods_direction(teacher, x, w, 1.0)) - 1.0) < STEP_TOLERANCE


def test_confods_step_norm(teacher, rng):
    x = rng.normal(size=(10, 2))
    w = sample_guide(rng, 3, size=10)
    eta, tau = 0.03, 2.0
    steps = np.linalg.norm(perturb_confods(x, teacher, w, eta, tau) - x, axis=1)
    confidence = teacher.predict_proba(x, tau).max(axis=1)
    assert np.all(np.abs(steps - eta * confidence) < STEP_TOLERANCE)


def test_adversarial_lowers_true_class(teacher, rng):
    x = rng.normal(size=(10, 2))
    labels = np.eye(3)[rng.integers(3, size=10)]
    perturbed = perturb_adversarial(x, teacher, labels, 0.01, 1.0)
    assert np.all(np.abs(np.linalg.norm(perturbed - x, axis=1) - 0.01) < STEP_TOLERANCE)
    before = np.sum(teacher.predict_proba(x) * labels, axis=1)
    after = np.sum(teacher.predict_proba(perturbed) * labels, axis=1)
    assert np.mean(after) < np.mean(before)


@parametrize("factor", [0.5, 3.0])
def test_guide_scale_invariance(teacher, rng, factor):
    x = rng.normal(size=(5, 2))
    w = sample_guide(rng, 3, size=5)
    assert np.allclose(ods_direction(teacher, x, w, 4.0), ods_direction(teacher, x, factor * w, 4.0), atol=1e-12)


def test_zero_eta_is_identity(teacher, rng):
    x = rng.normal(size=(4, 2))
    perturbed = perturb_ods(x, teacher, sample_guide(rng, 3, size=4), 0.0, 4.0)
    assert np.array_equal(perturbed, x)
    assert perturbed is not x


def test_negative_eta(teacher, rng):
    with pytest.raises(DomainError):
        perturb_ods(np.zeros(2), teacher, sample_guide(rng, 3), -0.1, 4.0)


def test_degenerate_gradient(zero_teacher, rng):
    x = rng.normal(size=(3, 2))
    with pytest.raises(DegenerateGradient) as info:
        perturb_ods(x, zero_teacher, sample_guide(rng, 3, size=3), 0.01, 4.0)
    assert info.value.data == [0, 1, 2]


def test_perturber_falls_back_on_degenerate_rows(zero_teacher, teacher, rng):
    cfg = PerturbationConfig(Strategy.ODS, eta=0.01)
    perturber = Perturber(cfg, [zero_teacher, teacher], rng)
    x = rng.normal(size=(50, 2))
    perturbed = perturber.perturb(x)
    steps = np.linalg.norm(perturbed - x, axis=1)
    unchanged = steps == 0
    assert np.all(np.abs(steps[~unchanged] - 0.01) < STEP_TOLERANCE)
    assert perturber.stats.degenerate == int(unchanged.sum()) > 0
    assert perturber.stats.examples == 50


def test_gaussian(rng):
    x = np.zeros((2000, 3))
    noise = perturb_gaussian(x, 0.5, rng)
    assert abs(noise.std() - 0.5) < 0.02
    normalized = perturb_gaussian(x, 0.5, rng, step_norm=0.1)
    assert np.allclose(np.linalg.norm(normalized, axis=1), 0.1)


def test_gaussian_noise_norm(rng):
    sigma, dim = 0.3, 8
    norms = np.linalg.norm(perturb_gaussian(np.zeros((10_000, dim)), sigma, rng), axis=1)
    # mean of a chi distribution with dim degrees of freedom
    expected = sigma * np.sqrt(dim - 0.5)
    assert abs(norms.mean() - expected) < 0.05 * expected


def test_perturber_none_returns_input(teacher, rng):
    x = rng.normal(size=(3, 2))
    assert np.array_equal(Perturber(PerturbationConfig(), [teacher], rng).perturb(x), x)


def test_perturber_gaussian_defaults_sigma_to_eta(rng):
    cfg = PerturbationConfig(Strategy.GAUSSIAN, eta=0.2)
    assert cfg.sigma == 0.2
    x = np.zeros((4000, 2))
    assert abs(Perturber(cfg, [], rng).perturb(x).std() - 0.2) < 0.01


def test_perturber_needs_sources(rng):
    with pytest.raises(UsageError):
        Perturber(PerturbationConfig(Strategy.ODS), [], rng)


def test_perturber_adversarial_needs_labels(teacher, rng):
    perturber = Perturber(PerturbationConfig(Strategy.ADVERSARIAL), [teacher], rng)
    with pytest.raises(UsageError):
        perturber.perturb(rng.normal(size=(2, 2)))
    labels = np.eye(3)[[0, 2]]
    x = rng.normal(size=(2, 2))
    assert np.allclose(perturber.perturb(x, labels), perturb_adversarial(x, teacher, labels, 1 / 255, 4.0))


def test_perturber_is_seeded(teachers):
    cfg = PerturbationConfig(Strategy.CONFODS, eta=0.05)
    x = np.random.default_rng(0).normal(size=(8, 2))
    first = Perturber(cfg, list(teachers), np.random.default_rng(7)).perturb(x)
    second = Perturber(cfg, list(teachers), np.random.default_rng(7)).perturb(x)
    assert np.array_equal(first, second)


def test_share_across_batch(teachers):
    cfg = PerturbationConfig(Strategy.ODS, eta=0.05, share_across_batch=True)
    x = np.tile(np.array([[0.3, -0.2]]), (6, 1))
    perturbed = Perturber(cfg, list(teachers), np.random.default_rng(3)).perturb(x)
    # identical inputs with one shared teacher and guide move identically
    assert np.allclose(perturbed, perturbed[0])


def test_unknown_strategy():
    with pytest.raises(ValueError):
        PerturbationConfig("bogus")
