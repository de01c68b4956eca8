import dataclasses

import numpy as np
import pytest
from pytest_cases import parametrize
from scipy.spatial.distance import cdist
from sklearn.linear_model import LogisticRegression

from odskd.artifacts import read_json
from odskd.data import (
    FEATURE_RANGE,
    MANIFEST,
    Dataset,
    Split,
    gen_blobs,
    gen_ood_shift,
    gen_spirals,
    read_bundle,
    spiral_points,
    write_bundle,
)
from odskd.exceptions import ValidationError


def _assert_same(a: Dataset, b: Dataset):
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_blobs_split_sizes(blobs):
    assert blobs.train.num_examples == 72
    assert blobs.val.num_examples == 9
    assert blobs.test.num_examples == 9
    assert blobs.manifest["sizes"] == {"train": 72, "val": 9, "test": 9}
    for dataset, per_class in ((blobs.train, 24), (blobs.val, 3), (blobs.test, 3)):
        assert list(dataset.labels.sum(axis=0)) == [per_class] * 3


def test_spirals_split_sizes(spirals):
    assert spirals.train.input_dim == 2
    assert spirals.train.num_classes == 4
    assert [spirals.split(name).num_examples for name in ("train", "val", "test")] == [64, 8, 8]
    assert list(spirals.val.labels.sum(axis=0)) == [2] * 4


@parametrize("bundle_name", ["blobs", "spirals"])
def test_splits_are_disjoint(request, bundle_name):
    bundle = request.getfixturevalue(bundle_name)
    rows = np.concatenate([bundle.split(split).features for split in ("train", "val", "test")])
    assert len(np.unique(rows, axis=0)) == len(rows)


def test_tight_blobs_are_linearly_separable():
    bundle = gen_blobs(4, 3, 30, spread=1e-3, seed=2)
    classifier = LogisticRegression(C=1e4, max_iter=1000)
    classifier.fit(bundle.train.features, bundle.train.class_indices)
    assert classifier.score(bundle.test.features, bundle.test.class_indices) == 1.0


@parametrize("generate", [lambda s: gen_blobs(4, 3, 20, 0.5, s), lambda s: gen_spirals(3, 20, 0.2, s)])
def test_generators_are_deterministic(generate):
    first, second, other = generate(5), generate(5), generate(6)
    for split in ("train", "val", "test"):
        _assert_same(first.split(split), second.split(split))
    assert not np.array_equal(first.train.features, other.train.features)


def test_features_are_clipped():
    bundle = gen_blobs(2, 2, 50, spread=10.0, seed=0)
    for split in ("train", "val", "test"):
        assert np.abs(bundle.split(split).features).max() <= FEATURE_RANGE


def test_noise_free_spirals_lie_on_arms():
    bundle = gen_spirals(3, 10, noise=0.0, seed=1)
    radius = np.linalg.norm(bundle.train.features, axis=1)
    t = radius / 2.8
    for x, k, tk in zip(bundle.train.features, bundle.train.class_indices, t):
        assert np.allclose(spiral_points(k, 3, np.array([tk]))[0], x, atol=1e-9)


@parametrize(
    "generate",
    [
        lambda: gen_blobs(1, 2, 20, 0.5, 0),
        lambda: gen_blobs(2, 1, 20, 0.5, 0),
        lambda: gen_blobs(2, 2, 9, 0.5, 0),
        lambda: gen_blobs(2, 2, 20, -1.0, 0),
        lambda: gen_spirals(3, 20, float("nan"), 0),
    ],
)
def test_invalid_generator_parameters(generate):
    with pytest.raises(ValidationError):
        generate()


def test_ood_shift(blobs):
    ood = gen_ood_shift(blobs, shift=6.0, seed=3)
    assert ood.split == Split.OOD
    assert ood.num_examples == blobs.test.num_examples
    assert ood.meta["shift"] == 6.0
    assert np.linalg.norm(ood.meta["direction"]) == pytest.approx(1.0)
    # not clipped to the training support
    assert np.abs(ood.features).max() > FEATURE_RANGE
    _assert_same(ood, gen_ood_shift(blobs, shift=6.0, seed=3))


def test_large_ood_shift_leaves_training_support(blobs):
    train = blobs.train.features
    diameter = cdist(train, train).max()
    ood = gen_ood_shift(blobs, shift=30.0, seed=5)
    assert cdist(ood.features, train).min() > diameter


def test_ood_shift_spirals(spirals):
    shifted = gen_ood_shift(spirals, shift=0.0, seed=1)
    assert shifted.num_examples == spirals.test.num_examples
    assert shifted.input_dim == 2


def test_missing_split(blobs):
    with pytest.raises(ValidationError):
        blobs.split("ood")
    with pytest.raises(ValueError):
        blobs.split("holdout")


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), np.eye(2)[[0, 1]])
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 2)), np.array([[0.5, 0.5], [1.0, 0.0]]))


def test_bundle_round_trip(tmp_path, spirals):
    bundle = dataclasses.replace(spirals, ood=gen_ood_shift(spirals, shift=4.0, seed=9))
    write_bundle(bundle, tmp_path, config_echo={"command": "gen-data"})
    loaded = read_bundle(tmp_path)
    for split in Split:
        _assert_same(loaded.split(split.value), bundle.split(split.value))
    manifest = read_json(tmp_path / MANIFEST)
    assert manifest["ood"]["shift"] == 4.0
    assert manifest["config_echo"] == {"command": "gen-data"}
    assert loaded.manifest["generator"] == "spirals"


def test_read_bundle_errors(tmp_path, blobs):
    with pytest.raises(ValidationError):
        read_bundle(tmp_path)
    write_bundle(blobs, tmp_path)
    (tmp_path / "val.csv").unlink()
    with pytest.raises(ValidationError):
        read_bundle(tmp_path)


def test_read_bundle_rejects_bad_labels(tmp_path, blobs):
    write_bundle(blobs, tmp_path)
    text = (tmp_path / "test.csv").read_text(encoding="utf-8").splitlines()
    fields = text[1].split(",")
    fields[-1] = "7"
    text[1] = ",".join(fields)
    (tmp_path / "test.csv").write_text("\n".join(text) + "\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        read_bundle(tmp_path)
