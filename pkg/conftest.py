"""
Setup for all tests.

Small datasets and models are shared here. Suites that train to convergence
are gated by ODSKD_RUN_SLOW, see odskd.test_env.
"""
# pylint: disable=redefined-outer-name
import logging

import numpy as np
import pytest

from odskd.data import gen_blobs, gen_spirals
from odskd.models import BatchEnsembleStudent, DeepEnsemble, MlpTeacher
from odskd.train import OptimConfig, ScheduleConfig, train_teachers

logger = logging.getLogger(__name__)
logging.getLogger("numexpr").setLevel(logging.WARN)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    """3 classes in 2-D, 30 samples per class."""
    return gen_blobs(3, 2, 30, spread=0.4, seed=0)


@pytest.fixture(scope="session")
def spirals():
    return gen_spirals(4, 20, noise=0.1, seed=0)


@pytest.fixture
def teacher():
    """Hidden biases of 3 keep every ReLU active near the origin."""
    model = MlpTeacher.initialize([2, 8, 3], seed=0)
    model.parameters["b0"][...] = 3.0
    return model


@pytest.fixture
def teachers():
    return DeepEnsemble([MlpTeacher.initialize([2, 8, 3], seed=seed) for seed in range(3)])


@pytest.fixture
def student():
    return BatchEnsembleStudent.initialize([2, 6, 3], 3, seed=0)


@pytest.fixture(scope="session")
def trained_teachers(blobs):
    """Three teachers trained for a few epochs. Treat as read-only."""
    return train_teachers(
        blobs,
        [2, 8, 3],
        3,
        ScheduleConfig(base_lr=0.1, total_epochs=10, warmup_epochs=1),
        OptimConfig(batch_size=16),
        seeds=[0, 1, 2],
    )
