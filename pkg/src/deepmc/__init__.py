"""Deep linear networks for low-rank matrix completion."""
from .baselines import BaselineResult, nuclear_min, soft_impute, soft_impute_path, svt
from .data import SyntheticSpec, generate_low_rank, load_movielens, read_ratings
from .estimators import DeepLinearCompleter, EmbeddingRecommender, NuclearNormCompleter, SoftImputeCompleter
from .exceptions import (
    ConfigError,
    DataFormatError,
    DeepMCError,
    DegenerateSpectrumError,
    DivergedError,
    InvalidInputError,
    NumericalFailureError,
    UnsupportedOperationError,
    UnsupportedSizeError,
)
from .models import DeepLinearNet, init_gaussian
from .optimizers import OptimizerSpec, OptimizerState
from .penalties import PenaltySpec, parse_penalty, penalty_gradient, penalty_value
from .spectral import effective_rank, spectral_measures, svd
from .training import MaskedMatrix, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BaselineResult", "nuclear_min", "soft_impute", "soft_impute_path", "svt",
    "SyntheticSpec", "generate_low_rank", "load_movielens", "read_ratings",
    "DeepLinearCompleter", "EmbeddingRecommender", "NuclearNormCompleter", "SoftImputeCompleter",
    "ConfigError", "DataFormatError", "DeepMCError", "DegenerateSpectrumError", "DivergedError",
    "InvalidInputError", "NumericalFailureError", "UnsupportedOperationError", "UnsupportedSizeError",
    "DeepLinearNet", "init_gaussian", "OptimizerSpec", "OptimizerState",
    "PenaltySpec", "parse_penalty", "penalty_gradient", "penalty_value",
    "effective_rank", "spectral_measures", "svd", "MaskedMatrix", "TrainConfig", "train",
]
