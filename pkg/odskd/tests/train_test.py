# pylint: disable=redefined-outer-name
import numpy as np
import pytest
from pytest_cases import parametrize

from odskd import diffcore as dc
from odskd.artifacts import read_csv
from odskd.data import DataBundle, Dataset, Split
from odskd.exceptions import ConfigurationError, DomainError, ShapeError, ValidationError
from odskd.losses import LossConfig, combined_distill_loss
from odskd.metrics import PredictionBatch, accuracy
from odskd.models import BatchEnsembleStudent, MlpTeacher, ensemble_predict
from odskd.perturb import PerturbationConfig, Strategy
from odskd.train import (
    LOG_COLUMNS,
    SWEEP_COLUMNS,
    OptimConfig,
    OptimState,
    ScheduleConfig,
    check_trainable,
    distill,
    iterate_minibatches,
    lr_at,
    sgd_step,
    sweep_kd_hyperparameters,
    train_classifier,
    train_student_scratch,
    train_teachers,
    write_training_log,
)

QUICK = ScheduleConfig(base_lr=0.1, total_epochs=6, warmup_epochs=1)


def test_schedule_phases():
    cfg = ScheduleConfig(base_lr=1.0, total_epochs=100, warmup_epochs=5)
    assert lr_at(0, cfg) == pytest.approx(0.01)
    assert lr_at(5, cfg) == 1.0
    assert lr_at(50, cfg) == 1.0
    assert lr_at(70, cfg) == pytest.approx(1.0 + (0.01 - 1.0) * 20 / 40)
    assert lr_at(90, cfg) == pytest.approx(0.01)
    assert lr_at(99, cfg) == pytest.approx(0.01)
    lrs = [lr_at(epoch, cfg) for epoch in range(100)]
    assert all(a <= b for a, b in zip(lrs[:5], lrs[1:6]))
    assert all(a >= b for a, b in zip(lrs[50:], lrs[51:]))


def test_schedule_without_warmup():
    assert lr_at(0, ScheduleConfig(base_lr=0.5, total_epochs=10, warmup_epochs=0)) == 0.5


@parametrize("kwargs", [dict(base_lr=0.0), dict(total_epochs=0), dict(total_epochs=10, warmup_epochs=5)])
def test_schedule_config_domain(kwargs):
    with pytest.raises(DomainError):
        ScheduleConfig(**kwargs)


@parametrize("epoch", [-1, 100])
def test_lr_epoch_range(epoch):
    with pytest.raises(DomainError):
        lr_at(epoch, ScheduleConfig())


def test_sgd_step_oracle():
    theta = {"w": np.array([1.0, -2.0])}
    state = OptimState.for_parameters(theta, momentum=0.9, weight_decay=0.1, lr=0.5)
    grads = {"w": np.array([0.2, 0.4])}
    sgd_step(theta, grads, state)
    # v = g + wd * theta
    assert np.allclose(state.velocity["w"], [0.3, 0.2])
    assert np.allclose(theta["w"], [0.85, -2.1])
    sgd_step(theta, grads, state)
    v = 0.9 * np.array([0.3, 0.2]) + np.array([0.2, 0.4]) + 0.1 * np.array([0.85, -2.1])
    assert np.allclose(state.velocity["w"], v)
    assert np.allclose(theta["w"], np.array([0.85, -2.1]) - 0.5 * v)


def test_sgd_step_mismatch():
    theta = {"w": np.zeros(2)}
    state = OptimState.for_parameters(theta)
    with pytest.raises(ShapeError):
        sgd_step(theta, {"w": np.zeros(3)}, state)
    with pytest.raises(ShapeError):
        sgd_step(theta, {"v": np.zeros(2)}, state)


@parametrize("kwargs", [dict(momentum=1.0), dict(weight_decay=-1.0), dict(batch_size=0)])
def test_optim_config_domain(kwargs):
    with pytest.raises(DomainError):
        OptimConfig(**kwargs)


def test_minibatches_cover_all(rng):
    batches = list(iterate_minibatches(10, 4, rng))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches)) == list(range(10))


def test_train_classifier_learns(blobs):
    model = MlpTeacher.initialize([2, 8, 3], seed=0)
    initial = accuracy(PredictionBatch(model.predict_proba(blobs.val.features), blobs.val.labels))
    result = train_classifier(model, blobs, ScheduleConfig(0.1, 20, 1), OptimConfig(batch_size=16), seed=0)
    assert list(result.log_frame.columns) == LOG_COLUMNS
    assert len(result.log) == 20
    assert result.best_epoch >= 18
    assert result.best_val_acc >= initial
    assert result.log[-1]["train_loss"] < result.log[0]["train_loss"]


def test_training_is_deterministic(blobs):
    results = []
    for _ in range(2):
        model = MlpTeacher.initialize([2, 8, 3], seed=4)
        train_classifier(model, blobs, QUICK, OptimConfig(batch_size=16), seed=4)
        results.append(model.parameters)
    assert all(np.array_equal(results[0][name], results[1][name]) for name in results[0])


def test_snapshot_restores_best_epoch(blobs):
    model = MlpTeacher.initialize([2, 8, 3], seed=1)
    result = train_classifier(model, blobs, ScheduleConfig(0.1, 20, 1), OptimConfig(batch_size=16), seed=1)
    final = accuracy(PredictionBatch(model.predict_proba(blobs.val.features), blobs.val.labels))
    assert final == result.best_val_acc
    assert final == max(row["val_acc"] for row in result.log[18:])


def test_train_teachers_seeds(blobs):
    with pytest.raises(ValidationError):
        train_teachers(blobs, [2, 4, 3], 2, QUICK, OptimConfig(), seeds=[1, 1])
    with pytest.raises(ValidationError):
        train_teachers(blobs, [2, 4, 3], 2, QUICK, OptimConfig(), seeds=[1])


def test_train_teachers(trained_teachers):
    assert len(trained_teachers) == 3
    assert [t.training_meta["member"] for t in trained_teachers] == [0, 1, 2]
    assert trained_teachers[0].seed == 0
    assert not np.array_equal(trained_teachers[0].parameters["W0"], trained_teachers[1].parameters["W0"])


def test_single_class_data_is_rejected(blobs):
    labels = np.zeros_like(blobs.train.labels)
    labels[:, 0] = 1.0
    degenerate = DataBundle(Dataset(blobs.train.features, labels, Split.TRAIN), blobs.val, blobs.test)
    with pytest.raises(ValidationError):
        check_trainable(degenerate)
    with pytest.raises(ValidationError):
        train_teachers(degenerate, [2, 4, 3], 1, QUICK, OptimConfig(), seeds=[0])
    with pytest.raises(ValidationError):
        train_student_scratch(BatchEnsembleStudent.initialize([2, 4, 3], 2, 0), degenerate, QUICK, OptimConfig(), 0)


def test_dimension_mismatch(blobs):
    with pytest.raises(ConfigurationError):
        train_classifier(MlpTeacher.initialize([3, 4, 3], 0), blobs, QUICK, OptimConfig(), seed=0)


@parametrize("strategy", list(Strategy))
def test_distill_strategies(blobs, trained_teachers, strategy):
    student = BatchEnsembleStudent.initialize([2, 6, 3], 3, seed=0)
    teacher_params = [{k: v.copy() for k, v in t.parameters.items()} for t in trained_teachers]
    result = distill(
        list(trained_teachers),
        student,
        blobs,
        LossConfig(alpha=0.9, tau=4.0),
        PerturbationConfig(strategy, eta=0.02),
        QUICK,
        OptimConfig(batch_size=16),
        np.random.default_rng(0),
    )
    assert len(result.log) == QUICK.total_epochs
    assert np.isfinite(result.log[-1]["train_loss"])
    assert student.training_meta["strategy"] == strategy.value
    if strategy == Strategy.NONE:
        assert result.perturbed_examples == 0
    else:
        assert result.perturbed_examples == QUICK.total_epochs * blobs.train.num_examples
    for teacher, params in zip(trained_teachers, teacher_params):
        assert all(np.array_equal(teacher.parameters[k], v) for k, v in params.items())


def test_distill_teacher_count_mismatch(blobs, trained_teachers):
    student = BatchEnsembleStudent.initialize([2, 6, 3], 2, seed=0)
    with pytest.raises(ConfigurationError):
        distill(
            list(trained_teachers),
            student,
            blobs,
            LossConfig(),
            PerturbationConfig(),
            QUICK,
            OptimConfig(),
            np.random.default_rng(0),
        )


def test_distill_is_deterministic(blobs, trained_teachers):
    students = []
    for _ in range(2):
        student = BatchEnsembleStudent.initialize([2, 6, 3], 3, seed=2)
        distill(
            list(trained_teachers),
            student,
            blobs,
            LossConfig(),
            PerturbationConfig(Strategy.ODS, eta=0.02),
            QUICK,
            OptimConfig(batch_size=16),
            np.random.default_rng(11),
        )
        students.append(student)
    assert all(
        np.array_equal(students[0].parameters[name], students[1].parameters[name])
        for name in students[0].parameters
    )


def test_distill_single_step_is_gradient_descent(blobs, trained_teachers):
    student = BatchEnsembleStudent.initialize([2, 6, 3], 3, seed=4)
    initial = {name: value.copy() for name, value in student.parameters.items()}
    loss_cfg = LossConfig(alpha=0.7, tau=2.0)
    features, labels = blobs.train.features, blobs.train.labels
    leaves = student.leaves()
    dc.backward(combined_distill_loss(student, list(trained_teachers), features, features, labels, loss_cfg, leaves))

    distill(
        list(trained_teachers),
        student,
        blobs,
        loss_cfg,
        PerturbationConfig(),
        ScheduleConfig(base_lr=0.05, total_epochs=1, warmup_epochs=0),
        OptimConfig(momentum=0.0, weight_decay=0.0, batch_size=1000),
        np.random.default_rng(0),
    )
    for name, value in initial.items():
        assert np.allclose(student.parameters[name], value - 0.05 * leaves[name].grad, rtol=0, atol=1e-12)


def test_train_student_scratch(blobs):
    student = BatchEnsembleStudent.initialize([2, 6, 3], 2, seed=0)
    result = train_student_scratch(student, blobs, ScheduleConfig(0.1, 10, 1), OptimConfig(batch_size=16), seed=0)
    assert student.training_meta["role"] == "scratch"
    probs = ensemble_predict(student.members(), blobs.val.features)
    assert accuracy(PredictionBatch(probs, blobs.val.labels)) == result.best_val_acc


def test_sweep(blobs, trained_teachers):
    table = sweep_kd_hyperparameters(
        list(trained_teachers),
        lambda: BatchEnsembleStudent.initialize([2, 6, 3], 3, seed=0),
        blobs,
        alphas=[0.5, 1.0],
        taus=[1.0, 4.0],
        perturb_cfg=PerturbationConfig(),
        sched=ScheduleConfig(0.1, 3, 0),
        optim=OptimConfig(batch_size=32),
        seed=0,
    )
    assert list(table.columns) == SWEEP_COLUMNS
    assert len(table) == 4
    assert table["val_nll_calibrated"].le(table["val_nll"] + 1e-12).all()


def test_write_training_log(tmp_path, blobs):
    model = MlpTeacher.initialize([2, 4, 3], seed=0)
    result = train_classifier(model, blobs, QUICK, OptimConfig(batch_size=16), seed=0)
    write_training_log(result.log, tmp_path / "log.csv")
    frame = read_csv(tmp_path / "log.csv")
    assert list(frame.columns) == LOG_COLUMNS
    assert np.array_equal(frame["val_nll"].to_numpy(), result.log_frame["val_nll"].to_numpy())
