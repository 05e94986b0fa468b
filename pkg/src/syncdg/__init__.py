"""Drifting-domain benchmarks with a sequential causal representation model.

The package covers the full loop: generate synthetic domain streams whose
labeling rule drifts over time, train a static/dynamic latent-variable
classifier on the early domains, propagate its hidden-state bank through
later ones, and score worst/average accuracy on the future block.
"""

from ._common import (
    NonFiniteLossError,
    SequencingError,
    ValidationError,
    derive_seed,
)
from .domain_stream import (
    Domain,
    DomainSequence,
    SplitSpec,
    apply_drift_variant,
    generate_circle,
    generate_sine,
    load_sequence,
    save_sequence,
    sequence_batches,
    split_domains,
)
from .estimators import ErmClassifier, SyncClassifier
from .evaluation import (
    MetricReport,
    compute_metrics,
    decision_boundary_grid,
    disentanglement_curve,
    metrics_table,
)
from .latent_model import (
    HiddenStateBank,
    SyncModel,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import LossBreakdown, total_loss
from .predictor import PredictionRecord, predict_erm, predict_sequence
from .trainer import (
    ErmModel,
    RunManifest,
    TrainConfig,
    TrainResult,
    train,
    train_erm_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "Domain",
    "DomainSequence",
    "ErmClassifier",
    "ErmModel",
    "HiddenStateBank",
    "LossBreakdown",
    "MetricReport",
    "NonFiniteLossError",
    "PredictionRecord",
    "RunManifest",
    "SequencingError",
    "SplitSpec",
    "SyncClassifier",
    "SyncModel",
    "TrainConfig",
    "TrainResult",
    "ValidationError",
    "__version__",
    "apply_drift_variant",
    "compute_metrics",
    "decision_boundary_grid",
    "derive_seed",
    "disentanglement_curve",
    "generate_circle",
    "generate_sine",
    "load_checkpoint",
    "load_sequence",
    "metrics_table",
    "predict_erm",
    "predict_sequence",
    "save_checkpoint",
    "save_sequence",
    "sequence_batches",
    "split_domains",
    "total_loss",
    "train",
    "train_erm_baseline",
]
