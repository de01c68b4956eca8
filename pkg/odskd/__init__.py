"""
Ensemble distillation with output diversified input perturbations -- ODSKD.
Distill a deep ensemble of teachers into a BatchEnsemble student and diagnose the result
with calibration, diversity and Jacobian matching metrics.
"""
# This code is distributed under the MIT License

from odskd.artifacts import tool_version
from odskd.config import PRESETS, DistillConfig, RunConfig
from odskd.exceptions import (
    ConfigurationError,
    DegenerateGradient,
    NumericalError,
    OdskdException,
    UsageError,
    ValidationError,
)
from odskd.losses import LossConfig, combined_distill_loss, kd_loss
from odskd.models import BatchEnsembleStudent, DeepEnsemble, MlpTeacher
from odskd.perturb import PerturbationConfig, Perturber, Strategy
from odskd.train import distill, train_student_scratch, train_teachers

__version__ = tool_version()

__all__ = [
    "PRESETS",
    "BatchEnsembleStudent",
    "ConfigurationError",
    "DeepEnsemble",
    "DegenerateGradient",
    "DistillConfig",
    "LossConfig",
    "MlpTeacher",
    "NumericalError",
    "OdskdException",
    "PerturbationConfig",
    "Perturber",
    "RunConfig",
    "Strategy",
    "UsageError",
    "ValidationError",
    "combined_distill_loss",
    "distill",
    "kd_loss",
    "train_student_scratch",
    "train_teachers",
]
