"""actioncast: next-action forecasting from per-frame features.

Stacked-LSTM streams jointly learn a local next-action predictor and
multi-granularity task-progress estimators; a fusion head combines their
features to forecast the next distinct action in long, repetitive tasks.
Synthetic grammar-generated datasets stand in for real video features.
"""

__version__ = "0.1.0"

from .data import (
    DataFormatError,
    DatasetManifest,
    LabeledSequence,
    LoadedDataset,
    load_dataset,
    save_dataset,
    strip_null_frames,
)
from .evaluation import MetricsReport, compute_metrics, evaluate
from .grammar import (
    FeatureModel,
    GrammarError,
    TaskGrammar,
    default_feature_model,
    default_ikea_grammar,
    emit_features,
    generate_action_order,
    generate_dataset,
    generate_sequence,
)
from .losses import (
    ProgressBin,
    cdf_distance,
    cp_loss,
    cross_entropy_loss,
    cumulative_matrix,
    l2_progress_loss,
    one_hot_progress,
    predicted_bin,
    progress_bin,
)
from .model import (
    CombinedModelParams,
    ForecastSample,
    LossWeights,
    ModelConfig,
    forecast_target,
    forward_combined,
    forward_local,
    forward_progress,
    init_combined_model,
    load_checkpoint,
    save_checkpoint,
)
from .nn import (
    AdamConfig,
    AdamState,
    LstmLayerParams,
    adam_step,
    lstm_cell_step,
    lstm_stack_forward,
    sigmoid,
    softmax,
)
from .sampling import EvalClipConfig, SamplerConfig, balanced_batch, sample_clip
from .training import OptimizerConfig, TrainConfig, TrainingDivergedError, train

__all__ = [
    "AdamConfig",
    "AdamState",
    "CombinedModelParams",
    "DataFormatError",
    "DatasetManifest",
    "EvalClipConfig",
    "FeatureModel",
    "ForecastSample",
    "GrammarError",
    "LabeledSequence",
    "LoadedDataset",
    "LossWeights",
    "LstmLayerParams",
    "MetricsReport",
    "ModelConfig",
    "OptimizerConfig",
    "ProgressBin",
    "SamplerConfig",
    "TaskGrammar",
    "TrainConfig",
    "TrainingDivergedError",
    "adam_step",
    "balanced_batch",
    "cdf_distance",
    "compute_metrics",
    "cp_loss",
    "cross_entropy_loss",
    "cumulative_matrix",
    "default_feature_model",
    "default_ikea_grammar",
    "emit_features",
    "evaluate",
    "forecast_target",
    "forward_combined",
    "forward_local",
    "forward_progress",
    "generate_action_order",
    "generate_dataset",
    "generate_sequence",
    "init_combined_model",
    "l2_progress_loss",
    "load_checkpoint",
    "load_dataset",
    "lstm_cell_step",
    "lstm_stack_forward",
    "one_hot_progress",
    "predicted_bin",
    "progress_bin",
    "sample_clip",
    "save_checkpoint",
    "save_dataset",
    "sigmoid",
    "softmax",
    "strip_null_frames",
    "train",
]
