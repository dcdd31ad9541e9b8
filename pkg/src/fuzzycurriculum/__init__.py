"""Intuitionistic fuzzy labels, fuzzy auxiliary loss and region-wise curriculum training."""

from .curriculum import CurriculumSchedule, CurriculumState, lambda_at, make_rho
from .fuzzy_label import boundary_mask, compute_membership, fuzzify
from .losses import FixedRho, LossBreakdown, RhoPair, fuzzy_loss, softmax_field, total_loss
from .synth import SynthSpec, generate
from .trainer import TrainConfig, TrainingTrajectory, grad_cosine, train, uncertainty_map
from .volume import FuzzyLabelVolume, LabelVolume, LogitField, ProbField, ScalarField, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "CurriculumSchedule",
    "CurriculumState",
    "FixedRho",
    "FuzzyLabelVolume",
    "LabelVolume",
    "LogitField",
    "LossBreakdown",
    "ProbField",
    "RhoPair",
    "ScalarField",
    "SynthSpec",
    "TrainConfig",
    "TrainingTrajectory",
    "boundary_mask",
    "compute_membership",
    "fuzzify",
    "fuzzy_loss",
    "generate",
    "grad_cosine",
    "lambda_at",
    "make_rho",
    "read_volume",
    "softmax_field",
    "total_loss",
    "train",
    "uncertainty_map",
    "write_volume",
]
