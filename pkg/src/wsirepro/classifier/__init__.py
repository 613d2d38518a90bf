"""Tile classification: reference model, trainer, and external runners."""

from .external import (
    ExternalRunner,
    NonProbabilisticOutput,
    ProtocolViolation,
    RunnerCrashed,
    check_probabilities,
    classify_external,
)
from .features import N_FEATURES, TileFeatureExtractor, extract_features
from .model import (
    ClassifierError,
    DivergedLoss,
    EmptyClass,
    EpochMetrics,
    LabeledTile,
    NonFiniteModel,
    ReferenceClassifier,
    ReferenceModel,
    TrainConfig,
    ValidationSlide,
    classify_tile,
    cross_entropy,
    label_tiles_by_slide,
    predict_features,
    rmsprop_step,
    select_best_epoch,
    softmax,
    train_reference,
)

__all__ = [name for name in dir() if not name.startswith("_")]
