"""Variate-embedding mixture heads for linear time series forecasters."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    InsufficientDataError,
    NumericError,
    ShapeError,
    VEForecastError,
)
from .data import (
    SplitSpec,
    TimeSeriesDataset,
    WindowBatch,
    build_mixed_dataset,
    load_csv,
    prepare_forecast_splits,
)
from .head import VEHeadConfig, VariateMixtureHead, effective_p, lora_rank, param_count
from .models import ModelConfig, create_model, model_param_count
from .training import (
    RunMetrics,
    TrainConfig,
    evaluate,
    grid_search,
    multi_seed_run,
    run_experiment,
    train_model,
)
from .analysis import embedding_cosine_similarity, gate_weight_table, weighted_weight_magnitude
from .serialize import load_model, save_model

__all__ = [
    "ConfigError",
    "DataError",
    "InsufficientDataError",
    "NumericError",
    "ShapeError",
    "VEForecastError",
    "SplitSpec",
    "TimeSeriesDataset",
    "WindowBatch",
    "build_mixed_dataset",
    "load_csv",
    "prepare_forecast_splits",
    "VEHeadConfig",
    "VariateMixtureHead",
    "effective_p",
    "lora_rank",
    "param_count",
    "ModelConfig",
    "create_model",
    "model_param_count",
    "RunMetrics",
    "TrainConfig",
    "evaluate",
    "grid_search",
    "multi_seed_run",
    "run_experiment",
    "train_model",
    "embedding_cosine_similarity",
    "gate_weight_table",
    "weighted_weight_magnitude",
    "load_model",
    "save_model",
    "__version__",
]
