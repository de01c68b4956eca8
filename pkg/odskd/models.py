"""
Teacher MLP classifiers, the BatchEnsemble student and ensemble containers.

All models keep their parameters as a dictionary of named float64 arrays.
Forward passes build a fresh :mod:`odskd.diffcore` graph from leaves created by
:meth:`Classifier.leaves`, so the same code path yields gradients with respect to
parameters (training) and inputs (perturbations, Jacobians).
"""
# This code is distributed under the MIT License

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from cachetools import cached
from scipy.special import softmax

from odskd import diffcore as dc
from odskd.artifacts import PathLike, read_json, tool_version, write_json
from odskd.caches import checkpoint_cache, checkpoint_key
from odskd.diffcore import DiffNode
from odskd.exceptions import (
    ConfigurationError,
    MemberIndexError,
    ShapeError,
    UsageError,
    ValidationError,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FACTOR_INITS = ("random_sign", "constant")


def _check_widths(widths: Sequence[int]) -> List[int]:
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValidationError(f"Layer widths must be >= 2 positive integers, got {widths}")
    return widths


def _check_input(x: DiffNode, input_dim: int):
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"Expected inputs of shape [batch x {input_dim}], got {x.shape}")


class Classifier:
    """
    Base class of everything that maps inputs ``[batch x D]`` to logits ``[batch x K]``.
    Subclasses implement :meth:`forward`.
    """

    kind = ""

    def __init__(self, widths: Sequence[int], parameters: Dict[str, np.ndarray]):
        self.widths = _check_widths(widths)
        self.parameters = parameters

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def leaves(self, requires_grad: bool = True) -> Dict[str, DiffNode]:
        """Fresh graph leaves for all parameters."""
        make = dc.parameter if requires_grad else dc.constant
        return {name: make(value) for name, value in self.parameters.items()}

    def forward(self, x: DiffNode, leaves: Optional[Dict[str, DiffNode]] = None) -> DiffNode:
        """overwritten in subclasses
        Builds the graph of the logits for the inputs `x`."""
        raise NotImplementedError("implement in subclass")

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Logits without gradient tracking."""
        return self.forward(dc.constant(np.atleast_2d(x)), self.leaves(requires_grad=False)).value

    def predict_proba(self, x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.logits(x) / temperature, axis=1)


class MlpTeacher(Classifier):
    """
    Fully connected ReLU network. Layer ``l`` has weight ``W{l}`` of shape ``[d_in x d_out]``
    and bias ``b{l}`` of shape ``[d_out]``. The output layer is linear (logits).
    """

    kind = "mlp"

    def __init__(
        self,
        widths: Sequence[int],
        parameters: Dict[str, np.ndarray],
        seed: Optional[int] = None,
        training_meta: Optional[dict] = None,
    ):
        super().__init__(widths, parameters)
        self.seed = seed
        self.training_meta = training_meta if training_meta is not None else {}

    @staticmethod
    def parameter_shapes(widths: Sequence[int]) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"W{layer}"] = (d_in, d_out)
            shapes[f"b{layer}"] = (d_out,)
        return shapes

    @classmethod
    def initialize(cls, widths: Sequence[int], seed: int) -> MlpTeacher:
        """Kaiming (fan-in) Gaussian weights and zero biases."""
        widths = _check_widths(widths)
        rng = np.random.default_rng(seed)
        parameters = {}
        for name, shape in cls.parameter_shapes(widths).items():
            if name.startswith("W"):
                parameters[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            else:
                parameters[name] = np.zeros(shape)
        return cls(widths, parameters, seed=seed)

    def forward(self, x: DiffNode, leaves: Optional[Dict[str, DiffNode]] = None) -> DiffNode:
        _check_input(x, self.input_dim)
        leaves = leaves if leaves is not None else self.leaves(requires_grad=False)
        h = x
        for layer in range(self.num_layers):
            h = h @ leaves[f"W{layer}"] + leaves[f"b{layer}"]
            if layer < self.num_layers - 1:
                h = dc.relu(h)
        return h


class BatchEnsembleStudent:
    """
    BatchEnsemble network with `ensemble_size` subnetworks.

    Every layer ``l`` holds a shared weight ``W{l}`` ``[d_in x d_out]`` and per-member
    input factors ``s{l}`` ``[M x d_in]``, output factors ``r{l}`` ``[M x d_out]`` and
    biases ``b{l}`` ``[M x d_out]``. The effective weight of member ``j`` is
    ``W[i, o] * s{l}[j, i] * r{l}[j, o]``, evaluated in factored form as
    ``((x * s_j) @ W) * r_j + b_j``.
    """

    kind = "batch_ensemble"
    per_member_bias = True

    def __init__(
        self,
        widths: Sequence[int],
        ensemble_size: int,
        parameters: Dict[str, np.ndarray],
        seed: Optional[int] = None,
        factor_init: str = "random_sign",
        training_meta: Optional[dict] = None,
    ):
        if ensemble_size < 1:
            raise ValidationError(f"Ensemble size must be >= 1, got {ensemble_size}")
        self.widths = _check_widths(widths)
        self.ensemble_size = int(ensemble_size)
        self.parameters = parameters
        self.seed = seed
        self.factor_init = factor_init
        self.training_meta = training_meta if training_meta is not None else {}

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @staticmethod
    def parameter_shapes(widths: Sequence[int], ensemble_size: int) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"W{layer}"] = (d_in, d_out)
            shapes[f"s{layer}"] = (ensemble_size, d_in)
            shapes[f"r{layer}"] = (ensemble_size, d_out)
            shapes[f"b{layer}"] = (ensemble_size, d_out)
        return shapes

    @classmethod
    def initialize(
        cls,
        widths: Sequence[int],
        ensemble_size: int,
        seed: int,
        factor_init: str = "random_sign",
    ) -> BatchEnsembleStudent:
        """
        Kaiming (fan-in) Gaussian shared weights, zero biases and rank-one factors
        with independent random signs (``factor_init="random_sign"``) or all ones
        (``factor_init="constant"``).
        """
        if factor_init not in FACTOR_INITS:
            raise ConfigurationError(
                f"Unknown factor init '{factor_init}' (known: {', '.join(FACTOR_INITS)})"
            )
        widths = _check_widths(widths)
        rng = np.random.default_rng(seed)
        parameters = {}
        for name, shape in cls.parameter_shapes(widths, ensemble_size).items():
            if name.startswith("W"):
                parameters[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            elif name.startswith("b"):
                parameters[name] = np.zeros(shape)
            elif factor_init == "random_sign":
                parameters[name] = rng.choice([-1.0, 1.0], size=shape)
            else:
                parameters[name] = np.ones(shape)
        return cls(widths, ensemble_size, parameters, seed=seed, factor_init=factor_init)

    def leaves(self, requires_grad: bool = True) -> Dict[str, DiffNode]:
        make = dc.parameter if requires_grad else dc.constant
        return {name: make(value) for name, value in self.parameters.items()}

    def _check_member(self, member: int):
        if not 0 <= member < self.ensemble_size:
            raise MemberIndexError(
                f"Member index {member} out of range for ensemble size {self.ensemble_size}"
            )

    def member_forward(
        self, member: int, x: DiffNode, leaves: Optional[Dict[str, DiffNode]] = None
    ) -> DiffNode:
        """Logits of subnetwork `member` (0-based) for inputs `x`."""
        self._check_member(member)
        _check_input(x, self.input_dim)
        leaves = leaves if leaves is not None else self.leaves(requires_grad=False)
        h = x
        for layer in range(self.num_layers):
            s = dc.take(leaves[f"s{layer}"], member)
            r = dc.take(leaves[f"r{layer}"], member)
            b = dc.take(leaves[f"b{layer}"], member)
            h = ((h * s) @ leaves[f"W{layer}"]) * r + b
            if layer < self.num_layers - 1:
                h = dc.relu(h)
        return h

    def explicit_weight(self, layer: int, member: int) -> np.ndarray:
        """The full weight matrix ``W o r_j s_j^T`` of `member` in `layer`, oriented ``[d_in x d_out]``."""
        self._check_member(member)
        weight = self.parameters[f"W{layer}"]
        s = self.parameters[f"s{layer}"][member]
        r = self.parameters[f"r{layer}"][member]
        return weight * np.outer(s, r)

    def members(self) -> List[StudentMember]:
        return [StudentMember(self, member) for member in range(self.ensemble_size)]


class StudentMember(Classifier):
    """
    View on a single subnetwork of a :class:`BatchEnsembleStudent`.
    Its parameters are the parameters of the whole student, so gradients taken through
    a member also reach the shared weights.
    """

    kind = "batch_ensemble_member"

    def __init__(self, student: BatchEnsembleStudent, member: int):
        student._check_member(member)  # pylint: disable=protected-access
        super().__init__(student.widths, student.parameters)
        self.student = student
        self.member = member

    def forward(self, x: DiffNode, leaves: Optional[Dict[str, DiffNode]] = None) -> DiffNode:
        return self.student.member_forward(self.member, x, leaves)


class DeepEnsemble:
    """M independently trained :class:`MlpTeacher` members sharing one architecture."""

    def __init__(self, members: Sequence[MlpTeacher]):
        if len(members) == 0:
            raise UsageError("A deep ensemble needs at least one member")
        widths = members[0].widths
        for member in members[1:]:
            if member.widths != widths:
                raise ConfigurationError(
                    f"Ensemble members differ in architecture: {widths} vs {member.widths}"
                )
        self.members = list(members)

    @property
    def widths(self) -> List[int]:
        return self.members[0].widths

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[MlpTeacher]:
        return iter(self.members)

    def __getitem__(self, index: int) -> MlpTeacher:
        return self.members[index]


def member_probs(members: Sequence[Classifier], x: np.ndarray) -> np.ndarray:
    """Softmax outputs of every member, shape ``[M x batch x K]``."""
    if len(members) == 0:
        raise UsageError("Need at least one ensemble member")
    return np.stack([member.predict_proba(x) for member in members])


def ensemble_predict(members: Sequence[Classifier], x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the member softmax probabilities."""
    return member_probs(members, x).mean(axis=0)


def param_count(model) -> int:
    """Exact number of scalar parameters of a model or a :class:`DeepEnsemble`."""
    if isinstance(model, DeepEnsemble):
        return int(np.sum([param_count(member) for member in model]))
    return int(np.sum([value.size for value in model.parameters.values()], dtype=np.int64))


def ensemble_members(model) -> List[Classifier]:
    """The list of classifiers whose probabilities are averaged for `model`."""
    if isinstance(model, BatchEnsembleStudent):
        return model.members()
    if isinstance(model, DeepEnsemble):
        return list(model.members)
    return [model]


# CHECKPOINTS


def checkpoint_dict(model, config_echo: Optional[dict] = None) -> dict:
    content = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "widths": model.widths,
        "seed": model.seed,
        "parameters": {name: value.ravel().tolist() for name, value in model.parameters.items()},
        "training_meta": dict(model.training_meta),
        "version": tool_version(),
    }
    if isinstance(model, BatchEnsembleStudent):
        content["M"] = model.ensemble_size
        content["per_member_bias"] = model.per_member_bias
        content["factor_init"] = model.factor_init
    if config_echo is not None:
        content["config_echo"] = config_echo
    return content


def save_checkpoint(model, path: PathLike, config_echo: Optional[dict] = None):
    if not isinstance(model, (MlpTeacher, BatchEnsembleStudent)):
        raise UsageError(f"Cannot save a checkpoint of {type(model).__name__}")
    write_json(path, checkpoint_dict(model, config_echo=config_echo))
    logger.info("Saved %s checkpoint to %s", model.kind, path)


def _parameters_from(content: dict, shapes: Dict[str, Tuple[int, ...]]) -> Dict[str, np.ndarray]:
    stored = content.get("parameters", {})
    if set(stored) != set(shapes):
        raise ValidationError(
            f"Checkpoint parameters {sorted(stored)} do not match architecture {sorted(shapes)}"
        )
    parameters = {}
    for name, shape in shapes.items():
        flat = np.asarray(stored[name], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise ValidationError(
                f"Parameter {name} has {flat.size} values, expected shape {shape}"
            )
        parameters[name] = flat.reshape(shape)
    return parameters


def model_from_dict(content: dict):
    if content.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"Unsupported checkpoint format version: {content.get('format_version')}"
        )
    kind = content.get("kind")
    widths = _check_widths(content.get("widths", []))
    if kind == MlpTeacher.kind:
        parameters = _parameters_from(content, MlpTeacher.parameter_shapes(widths))
        return MlpTeacher(
            widths,
            parameters,
            seed=content.get("seed"),
            training_meta=content.get("training_meta", {}),
        )
    if kind == BatchEnsembleStudent.kind:
        ensemble_size = int(content["M"])
        shapes = BatchEnsembleStudent.parameter_shapes(widths, ensemble_size)
        return BatchEnsembleStudent(
            widths,
            ensemble_size,
            _parameters_from(content, shapes),
            seed=content.get("seed"),
            factor_init=content.get("factor_init", "random_sign"),
            training_meta=content.get("training_meta", {}),
        )
    raise ValidationError(f"Unknown checkpoint kind: {kind}")


def read_checkpoint(path: PathLike):
    """Reads a checkpoint without caching. Use this for models that will be modified."""
    if not Path(path).is_file():
        raise ValidationError(f"Checkpoint not found: {path}")
    return model_from_dict(read_json(path))


@cached(cache=checkpoint_cache, key=checkpoint_key)
def _load_checkpoint_cached(path: PathLike):
    logger.debug("Loading checkpoint %s", path)
    return model_from_dict(read_json(path))


def load_checkpoint(path: PathLike):
    """Loads a checkpoint through :data:`odskd.caches.checkpoint_cache`.
    The returned model is shared between callers and must not be modified."""
    if not Path(path).is_file():
        raise ValidationError(f"Checkpoint not found: {path}")
    return _load_checkpoint_cached(path)


def ensemble_checkpoint_paths(directory: PathLike) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"Ensemble directory not found: {directory}")
    paths = sorted(directory.glob("member_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if len(paths) == 0:
        raise ValidationError(f"No member_*.json checkpoints in {directory}")
    return paths


def load_ensemble(directory: PathLike) -> DeepEnsemble:
    """Loads all ``member_<i>.json`` checkpoints of a directory, ordered by member index."""
    members = []
    for path in ensemble_checkpoint_paths(directory):
        member = load_checkpoint(path)
        if not isinstance(member, MlpTeacher):
            raise ValidationError(f"{path} is not a teacher checkpoint")
        members.append(member)
    return DeepEnsemble(members)


def load_model(path: PathLike):
    """A teacher directory becomes a :class:`DeepEnsemble`, a file a single checkpoint."""
    if Path(path).is_dir():
        return load_ensemble(path)
    return load_checkpoint(path)
