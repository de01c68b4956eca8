import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from odskd.artifacts import tool_version
from odskd.exceptions import ConfigurationError
from odskd.losses import LossConfig
from odskd.perturb import PerturbationConfig, Strategy
from odskd.train import OptimConfig, ScheduleConfig

logger = logging.getLogger(__name__)

# pandas loads numexpr when it is installed, which reports its thread pool at INFO
LOG_LEVEL_OVERRIDES = {
    "numexpr": logging.WARN,
}

# verbosity 0..3
VERBOSITY_LEVELS = (logging.ERROR, logging.WARN, logging.INFO, logging.DEBUG)


def _apply_log_level_overrides():
    for name, level in LOG_LEVEL_OVERRIDES.items():
        logging.getLogger(name).setLevel(level)


# dotted config keys and the DistillConfig attribute they set
CONFIG_KEYS = {
    "loss.alpha": "alpha",
    "loss.tau": "tau",
    "sched.base_lr": "base_lr",
    "sched.epochs": "total_epochs",
    "sched.warmup": "warmup_epochs",
    "optim.momentum": "momentum",
    "optim.weight_decay": "weight_decay",
    "optim.batch_size": "batch_size",
    "model.m": "ensemble_size",
    "perturb.strategy": "strategy",
    "perturb.eta": "eta",
    "perturb.tau": "perturb_tau",
    "perturb.sigma": "gaussian_sigma",
    "perturb.gaussian_normalize": "gaussian_normalize",
    "perturb.share_across_batch": "share_across_batch",
    "metrics.ece_bins": "ece_bins",
    "diversity.bins": "diversity_bins",
    "seed": "seed",
}

# Published settings of the full scale experiments (ResNet-32 on CIFAR-10, WideResNet-28x10
# on CIFAR-100). The architectures are out of scope, the optimizer settings are kept for reference.
PRESETS: Dict[str, Dict[str, Any]] = {
    "cifar10-resnet32-de": {
        "model.m": 4,
        "optim.batch_size": 512,
        "sched.base_lr": 0.4,
        "optim.weight_decay": 4e-4,
        "sched.epochs": 200,
    },
    "cifar10-resnet32-be4": {
        "model.m": 4,
        "optim.batch_size": 512,
        "sched.base_lr": 0.1,
        "optim.weight_decay": 4e-4,
        "sched.epochs": 250,
        "loss.alpha": 0.9,
        "loss.tau": 4.0,
    },
    "cifar10-resnet32-be8": {
        "model.m": 8,
        "optim.batch_size": 512,
        "sched.base_lr": 0.05,
        "optim.weight_decay": 4e-4,
        "sched.epochs": 250,
        "loss.alpha": 0.9,
        "loss.tau": 4.0,
    },
    "cifar100-wrn28x10-de": {
        "model.m": 4,
        "optim.batch_size": 256,
        "sched.base_lr": 0.2,
        "optim.weight_decay": 5e-4,
        "sched.epochs": 300,
    },
    "cifar100-wrn28x10-be4": {
        "model.m": 4,
        "optim.batch_size": 256,
        "sched.base_lr": 0.05,
        "optim.weight_decay": 5e-4,
        "sched.epochs": 250,
        "loss.alpha": 0.9,
        "loss.tau": 1.0,
    },
}


class DistillConfig:
    """
    The configuration of training, distillation and evaluation runs.
    Values are validated whenever they are set.
    """

    def __init__(self):
        self.alpha: float = 0.9
        self.tau: float = 4.0

        self.base_lr: float = 0.1
        self.total_epochs: int = 100
        self.warmup_epochs: int = 5
        self.momentum: float = 0.9
        self.weight_decay: float = 5e-4
        self.batch_size: int = 64

        # number of teachers and of student subnetworks
        self.ensemble_size: int = 4

        self.strategy: Strategy = Strategy.NONE
        self.eta: float = 1 / 255
        self.perturb_tau: Optional[float] = None  # None: use tau
        self.gaussian_sigma: Optional[float] = None  # None: use eta
        self.gaussian_normalize = False
        self.share_across_batch = False

        self.ece_bins: int = 15
        self.diversity_bins: int = 20
        self.seed: int = 0

    def set_verbosity(self, verbosity: int, set_global=False):
        """
        :param verbosity: 0 (errors only) to 3 (debug).
        :param set_global: Set the level of the root logger instead of the odskd loggers.
            The CLI does this, as it logs through a handler on the root logger.
        """
        if not 0 <= verbosity < len(VERBOSITY_LEVELS):
            raise ValueError(f"Verbosity needs to be [0-{len(VERBOSITY_LEVELS) - 1}], got {verbosity}")

        level = VERBOSITY_LEVELS[int(verbosity)]
        target = logging.getLogger() if set_global else logging.getLogger("odskd")
        target.setLevel(level)
        logger.debug("Log level of '%s' set to %s", target.name, logging.getLevelName(level))
        _apply_log_level_overrides()

    def set_loss(self, alpha: float, tau: float):
        """
        :param alpha: Weight of the distillation term, in (0, 1].
        :param tau: Softening temperature of the distillation term.
        """
        LossConfig(alpha, tau)
        self.alpha, self.tau = alpha, tau

    def set_schedule(self, base_lr: float, total_epochs: int, warmup_epochs: int = 5):
        ScheduleConfig(base_lr, total_epochs, warmup_epochs)
        self.base_lr, self.total_epochs, self.warmup_epochs = base_lr, total_epochs, warmup_epochs

    def set_optimizer(self, momentum: float, weight_decay: float, batch_size: int):
        OptimConfig(momentum, weight_decay, batch_size)
        self.momentum, self.weight_decay, self.batch_size = momentum, weight_decay, batch_size

    def set_ensemble_size(self, ensemble_size: int):
        if ensemble_size < 1:
            raise ConfigurationError(f"Ensemble size must be positive, got {ensemble_size}")
        self.ensemble_size = ensemble_size

    def set_perturbation(
        self,
        strategy: Strategy,
        eta: float = 1 / 255,
        tau: Optional[float] = None,
        gaussian_sigma: Optional[float] = None,
        gaussian_normalize: bool = False,
        share_across_batch: bool = False,
    ):
        """
        :param strategy: One of none, gaussian, ods, confods, adversarial.
        :param tau: Temperature the perturbation directions are computed at. Defaults to the
            distillation temperature.
        """
        try:
            strategy = Strategy(strategy)
        except ValueError as e:
            raise ConfigurationError(f"Unknown perturbation strategy '{strategy}'") from e
        PerturbationConfig(
            strategy,
            eta=eta,
            tau=tau if tau is not None else self.tau,
            gaussian_sigma=gaussian_sigma,
            gaussian_normalize=gaussian_normalize,
            share_across_batch=share_across_batch,
        )
        self.strategy, self.eta, self.perturb_tau = strategy, eta, tau
        self.gaussian_sigma = gaussian_sigma
        self.gaussian_normalize = gaussian_normalize
        self.share_across_batch = share_across_batch

    def set_bins(self, ece_bins: int, diversity_bins: int):
        if ece_bins < 1 or diversity_bins < 1:
            raise ConfigurationError(f"Bin counts must be positive, got {ece_bins} and {diversity_bins}")
        self.ece_bins, self.diversity_bins = ece_bins, diversity_bins

    def apply_preset(self, name: str):
        """Overwrites the values named by one of the :data:`PRESETS`."""
        if name not in PRESETS:
            raise ConfigurationError(f"Unknown preset '{name}' (known: {', '.join(sorted(PRESETS))})")
        logger.info("Applying preset %s", name)
        self.update(PRESETS[name])

    def update(self, values: Dict[str, Any]):
        """
        Sets values by their dotted config keys, e.g. ``{"loss.alpha": 0.8}``.
        Either all values are applied or, if one is invalid, none.

        :raises ConfigurationError: for unknown keys and invalid combinations of values.
        """
        unknown = sorted(set(values) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}")
        merged = {**self.to_dict(), **values}

        staged = copy.copy(self)
        staged.set_loss(merged["loss.alpha"], merged["loss.tau"])
        staged.set_schedule(merged["sched.base_lr"], merged["sched.epochs"], merged["sched.warmup"])
        staged.set_optimizer(merged["optim.momentum"], merged["optim.weight_decay"], merged["optim.batch_size"])
        staged.set_ensemble_size(merged["model.m"])
        staged.set_perturbation(
            merged["perturb.strategy"],
            eta=merged["perturb.eta"],
            tau=merged["perturb.tau"],
            gaussian_sigma=merged["perturb.sigma"],
            gaussian_normalize=merged["perturb.gaussian_normalize"],
            share_across_batch=merged["perturb.share_across_batch"],
        )
        staged.set_bins(merged["metrics.ece_bins"], merged["diversity.bins"])
        staged.seed = merged["seed"]
        self.__dict__.update(staged.__dict__)

    def validate(self):
        self.update({})

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, tau=self.tau)

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.total_epochs, self.warmup_epochs)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(self.momentum, self.weight_decay, self.batch_size)

    def perturbation_config(self) -> PerturbationConfig:
        return PerturbationConfig(
            strategy=self.strategy,
            eta=self.eta,
            tau=self.perturb_tau if self.perturb_tau is not None else self.tau,
            gaussian_sigma=self.gaussian_sigma,
            gaussian_normalize=self.gaussian_normalize,
            share_across_batch=self.share_across_batch,
        )

    def to_dict(self) -> Dict[str, Any]:
        """The values by their dotted config keys."""
        content = {key: getattr(self, attribute) for key, attribute in CONFIG_KEYS.items()}
        content["perturb.strategy"] = self.strategy.value
        return content


@dataclass
class RunConfig:
    """The resolved configuration of one command, echoed into every artifact it writes."""

    command: str
    values: Dict[str, Any] = field(default_factory=dict)
    distill_config: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(
        cls,
        command: str,
        values: Dict[str, Any],
        config: DistillConfig,
        path_keys: Iterable[str] = (),
    ) -> "RunConfig":
        resolved = dict(values)
        for key in path_keys:
            value = resolved.get(key)
            if isinstance(value, list):
                resolved[key] = [str(Path(item).resolve()) for item in value]
            elif value is not None:
                resolved[key] = str(Path(value).resolve())
        return cls(command, resolved, config.to_dict())

    def echo(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "values": self.values,
            "config": self.distill_config,
            "version": tool_version(),
        }
