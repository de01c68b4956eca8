"""
Deterministic synthetic classification data: Gaussian blobs, spirals and shifted
out-of-distribution samples, with stratified 80/10/10 splits and CSV files.

A data directory holds ``train.csv``, ``val.csv``, ``test.csv``, optionally ``ood.csv``, and
``manifest.json``. The CSV files have the columns ``f0 .. f{D-1}, label`` (class index).
"""
# This code is distributed under the MIT License

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.datasets import make_blobs
from sklearn.model_selection import train_test_split

from odskd.artifacts import PathLike, read_csv, read_json, tool_version, write_csv, write_json
from odskd.exceptions import ValidationError
from odskd.losses import check_one_hot

logger = logging.getLogger(__name__)

FEATURE_RANGE = 3.0
SPIRAL_RADIUS = 2.8
BLOB_RADIUS = 2.0
# per class: 10 % validation, 10 % test
HOLDOUT_FRACTION = 0.1
MIN_PER_CLASS = 10

MANIFEST = "manifest.json"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    OOD = "ood"


def one_hot(indices: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(indices, dtype=int)]


@dataclass
class Dataset:
    features: np.ndarray
    """ ``[N x D]`` """

    labels: np.ndarray
    """ One-hot ``[N x K]``. For the OOD split they are kept but not used. """

    split: Split = Split.TRAIN
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.split = Split(self.split)
        if self.features.ndim != 2 or self.labels.ndim != 2 or len(self.features) != len(self.labels):
            raise ValidationError(
                f"Features of shape {self.features.shape} and labels of shape {self.labels.shape}"
            )
        check_one_hot(self.labels)

    @property
    def num_examples(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)


@dataclass
class DataBundle:
    train: Dataset
    val: Dataset
    test: Dataset
    ood: Optional[Dataset] = None
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> Dataset:
        dataset = getattr(self, Split(name).value)
        if dataset is None:
            raise ValidationError(f"The data has no '{name}' split")
        return dataset


def _check_sizes(num_classes: int, n_per_class: int, input_dim: int = 2):
    if num_classes < 2:
        raise ValidationError(f"Need K >= 2 classes, got K={num_classes}")
    if input_dim < 2:
        raise ValidationError(f"Need D >= 2 features, got D={input_dim}")
    if n_per_class < MIN_PER_CLASS:
        raise ValidationError(f"Need at least {MIN_PER_CLASS} samples per class, got {n_per_class}")


def _split(
    features: np.ndarray, classes: np.ndarray, num_classes: int, seed: int, meta: dict
) -> DataBundle:
    """Stratified split; every class gives exactly ``n // 10`` samples to val and to test."""
    n_per_class = meta["params"]["n_per_class"]
    holdout = int(n_per_class * HOLDOUT_FRACTION)
    x_train, x_rest, y_train, y_rest = train_test_split(
        features, classes, test_size=2 * holdout * num_classes, random_state=seed, stratify=classes
    )
    x_val, x_test, y_val, y_test = train_test_split(
        x_rest, y_rest, test_size=holdout * num_classes, random_state=seed, stratify=y_rest
    )
    sizes = {"train": len(x_train), "val": len(x_val), "test": len(x_test)}
    class_counts = {"train": n_per_class - 2 * holdout, "val": holdout, "test": holdout}
    manifest = {**meta, "sizes": sizes, "class_counts": class_counts}
    return DataBundle(
        train=Dataset(x_train, one_hot(y_train, num_classes), Split.TRAIN, meta),
        val=Dataset(x_val, one_hot(y_val, num_classes), Split.VAL, meta),
        test=Dataset(x_test, one_hot(y_test, num_classes), Split.TEST, meta),
        manifest=manifest,
    )


def blob_centers(num_classes: int, input_dim: int, seed: int) -> np.ndarray:
    """
    Class centers on a circle of radius 2 in the first two dimensions, at a random phase,
    and uniform in ``[-1, 1]`` in the remaining dimensions.
    """
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * math.pi)
    angles = phase + 2 * math.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, input_dim))
    centers[:, 0] = BLOB_RADIUS * np.cos(angles)
    centers[:, 1] = BLOB_RADIUS * np.sin(angles)
    centers[:, 2:] = rng.uniform(-1.0, 1.0, size=(num_classes, input_dim - 2))
    return centers


def _sample_blobs(centers: np.ndarray, n_per_class: int, spread: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    features, classes = make_blobs(
        n_samples=[n_per_class] * len(centers),
        n_features=centers.shape[1],
        centers=centers,
        cluster_std=spread,
        shuffle=True,
        random_state=seed,
    )
    return features, classes


def gen_blobs(num_classes: int, input_dim: int, n_per_class: int, spread: float, seed: int) -> DataBundle:
    """`num_classes` Gaussian clusters with standard deviation `spread`, clipped to ``[-3, 3]``."""
    _check_sizes(num_classes, n_per_class, input_dim)
    if not spread >= 0:
        raise ValidationError(f"spread must be nonnegative, got {spread}")
    features, classes = _sample_blobs(blob_centers(num_classes, input_dim, seed), n_per_class, spread, seed)
    meta = {
        "generator": "blobs",
        "K": num_classes,
        "D": input_dim,
        "seed": seed,
        "params": {"n_per_class": n_per_class, "spread": spread},
    }
    return _split(np.clip(features, -FEATURE_RANGE, FEATURE_RANGE), classes, num_classes, seed, meta)


def spiral_points(class_index: int, num_classes: int, t: np.ndarray, turns: float = 1.0) -> np.ndarray:
    """Noise free points of spiral arm `class_index` at the curve parameters ``t`` in ``[0, 1]``."""
    radius = SPIRAL_RADIUS * t
    theta = 2 * math.pi * class_index / num_classes + 2 * math.pi * turns * t
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def _sample_spirals(
    num_classes: int, n_per_class: int, noise: float, turns: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    features, classes = [], []
    for k in range(num_classes):
        t = rng.uniform(0.0, 1.0, size=n_per_class)
        features.append(spiral_points(k, num_classes, t, turns) + noise * rng.normal(size=(n_per_class, 2)))
        classes.append(np.full(n_per_class, k))
    order = rng.permutation(num_classes * n_per_class)
    return np.concatenate(features)[order], np.concatenate(classes)[order]


def gen_spirals(num_classes: int, n_per_class: int, noise: float, seed: int, turns: float = 1.0) -> DataBundle:
    """`num_classes` interleaved spiral arms in two dimensions with Gaussian noise of std `noise`."""
    _check_sizes(num_classes, n_per_class)
    if not noise >= 0:
        raise ValidationError(f"noise must be nonnegative, got {noise}")
    features, classes = _sample_spirals(num_classes, n_per_class, noise, turns, np.random.default_rng(seed))
    meta = {
        "generator": "spirals",
        "K": num_classes,
        "D": 2,
        "seed": seed,
        "params": {"n_per_class": n_per_class, "noise": noise, "turns": turns},
    }
    return _split(np.clip(features, -FEATURE_RANGE, FEATURE_RANGE), classes, num_classes, seed, meta)


def gen_ood_shift(base: DataBundle, shift: float, seed: int) -> Dataset:
    """
    Fresh samples from the generator of `base` (test split size), translated by `shift` along
    a random unit direction. Not clipped, so large shifts leave the training support.
    """
    meta = base.manifest
    num_classes, input_dim, params = meta["K"], meta["D"], meta["params"]
    n_per_class = max(int(params["n_per_class"] * HOLDOUT_FRACTION), 1)
    rng = np.random.default_rng(seed)
    if meta["generator"] == "blobs":
        centers = blob_centers(num_classes, input_dim, meta["seed"])
        features, classes = _sample_blobs(centers, n_per_class, params["spread"], seed)
    elif meta["generator"] == "spirals":
        features, classes = _sample_spirals(num_classes, n_per_class, params["noise"], params["turns"], rng)
    else:
        raise ValidationError(f"Unknown generator: {meta['generator']}")

    direction = rng.normal(size=input_dim)
    direction /= np.linalg.norm(direction)
    ood_meta = {"shift": shift, "direction": direction.tolist(), "seed": seed}
    logger.debug("OOD shift %.3g along %s", shift, direction)
    return Dataset(features + shift * direction, one_hot(classes, num_classes), Split.OOD, ood_meta)


# FILES


def _frame(dataset: Dataset):
    columns = {f"f{i}": dataset.features[:, i] for i in range(dataset.input_dim)}
    columns["label"] = dataset.class_indices
    return columns


def write_bundle(bundle: DataBundle, directory: PathLike, config_echo: Optional[dict] = None):
    """Writes the CSV files and the manifest, each atomically."""
    directory = Path(directory)
    manifest: Dict[str, object] = {**bundle.manifest, "version": tool_version()}
    if bundle.ood is not None:
        manifest["ood"] = {**bundle.ood.meta, "size": bundle.ood.num_examples}
    if config_echo is not None:
        manifest["config_echo"] = config_echo
    for split in Split:
        dataset = getattr(bundle, split.value)
        if dataset is not None:
            write_csv(pd.DataFrame(_frame(dataset)), directory / f"{split.value}.csv")
    write_json(directory / MANIFEST, manifest)
    logger.info("Wrote dataset to %s: %s", directory, manifest["sizes"])


def read_bundle(directory: PathLike) -> DataBundle:
    directory = Path(directory)
    if not (directory / MANIFEST).is_file():
        raise ValidationError(f"No dataset manifest in {directory}")
    manifest = read_json(directory / MANIFEST)
    num_classes, input_dim = manifest["K"], manifest["D"]
    feature_columns = [f"f{i}" for i in range(input_dim)]

    datasets = {}
    for split in Split:
        path = directory / f"{split.value}.csv"
        if not path.is_file():
            if split != Split.OOD:
                raise ValidationError(f"Missing split file {path}")
            continue
        frame = read_csv(path)
        missing = set(feature_columns + ["label"]) - set(frame.columns)
        if missing:
            raise ValidationError(f"{path} lacks the columns {sorted(missing)}")
        classes = frame["label"].to_numpy()
        if np.any(classes < 0) or np.any(classes >= num_classes):
            raise ValidationError(f"{path} has labels outside 0..{num_classes - 1}")
        meta = manifest.get("ood", {}) if split == Split.OOD else {}
        datasets[split.value] = Dataset(
            frame[feature_columns].to_numpy(dtype=np.float64), one_hot(classes, num_classes), split, meta
        )
    return DataBundle(manifest=manifest, **datasets)
