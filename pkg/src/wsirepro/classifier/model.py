"""Multinomial logistic reference classifier trained with mini-batch RMSProp."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .._rng import SplitMix64, fisher_yates
from ..catalog import CLASSES
from ..errors import WsiReproError
from ..evaluation import SlideResult, aggregate_slide, macro_auc
from .features import N_FEATURES, extract_features


class ClassifierError(WsiReproError):
    pass


class NonFiniteModel(ClassifierError):
    pass


class EmptyClass(ClassifierError):
    pass


class DivergedLoss(ClassifierError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"loss {loss} at epoch {epoch}")


@dataclass(frozen=True)
class ReferenceModel:
    weights: np.ndarray  # (3, 30)
    bias: np.ndarray  # (3,)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(len(CLASSES), N_FEATURES)
        b = np.array(self.bias, dtype=np.float64).reshape(len(CLASSES))
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls) -> "ReferenceModel":
        return cls(np.zeros((len(CLASSES), N_FEATURES)), np.zeros(len(CLASSES)))

    @property
    def version_digest(self) -> str:
        return hashlib.sha256(self.weights.astype("<f8").tobytes() + self.bias.astype("<f8").tobytes()).hexdigest()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias)))

    def to_json(self) -> str:
        # repr-precision floats so a saved model reloads bit-for-bit.
        return json.dumps({
            "classes": list(CLASSES),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "version_digest": self.version_digest,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ReferenceModel":
        data = json.loads(text)
        if tuple(data.get("classes", CLASSES)) != CLASSES:
            raise ClassifierError(f"model classes {data['classes']} differ from {list(CLASSES)}")
        model = cls(np.asarray(data["weights"]), np.asarray(data["bias"]))
        if "version_digest" in data and data["version_digest"] != model.version_digest:
            raise ClassifierError("model file digest does not match its parameters")
        return model

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ReferenceModel":
        return cls.from_json(Path(path).read_text())


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_features(model: ReferenceModel, features: np.ndarray) -> np.ndarray:
    if not model.is_finite():
        raise NonFiniteModel("model parameters contain NaN or infinity")
    return softmax(np.atleast_2d(features) @ model.weights.T + model.bias)


def classify_tile(model: ReferenceModel, tile) -> np.ndarray:
    """Class probabilities (normal, LUAD, LSCC) for one tile."""
    return predict_features(model, extract_features(tile))[0]


def cross_entropy(weights: np.ndarray, bias: np.ndarray, features: np.ndarray, onehot: np.ndarray):
    """Mean categorical cross-entropy and its gradients w.r.t. weights and bias."""
    probs = softmax(features @ weights.T + bias)
    n = features.shape[0]
    loss = -np.sum(onehot * np.log(np.clip(probs, 1e-300, None))) / n
    delta = (probs - onehot) / n
    return loss, delta.T @ features, delta.sum(axis=0)


def rmsprop_step(param: np.ndarray, grad: np.ndarray, accum: np.ndarray, lr: float, rho: float, eps: float):
    """One RMSProp update; returns ``(new_param, new_accum)``."""
    accum = rho * accum + (1.0 - rho) * grad * grad
    return param - lr * grad / np.sqrt(accum + eps), accum


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001
    rmsprop_rho: float = 0.9
    rmsprop_epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for name in ("learning_rate", "rmsprop_rho", "rmsprop_epsilon"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_auc_macro: float
    val_auc_per_class: tuple[float, float, float]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def select_best_epoch(metrics: Sequence[EpochMetrics]) -> int:
    """Index of the highest macro validation AUC; earliest on ties.

    Epochs whose macro AUC is undefined (NaN) are ignored; if none is defined
    the last epoch wins.
    """
    if not metrics:
        raise ValueError("no epochs to choose from")
    best, best_auc = len(metrics) - 1, -math.inf
    for i, m in enumerate(metrics):
        if not math.isnan(m.val_auc_macro) and m.val_auc_macro > best_auc:
            best, best_auc = i, m.val_auc_macro
    return best


class LabeledTile(NamedTuple):
    slide_uid: str
    tile_index: int
    label: str
    features: np.ndarray


class ValidationSlide(NamedTuple):
    sop_instance_uid: str
    patient_id: str
    true_class: str
    features: np.ndarray  # (n_tiles, 30)


def label_tiles_by_slide(tiles, slide_uid: str, slide_class: str) -> list[LabeledTile]:
    """Give every kept tile of one slide that slide's reference class."""
    if slide_class not in CLASSES:
        raise EmptyClass(f"slide {slide_uid} has no usable class ({slide_class!r})")
    return [LabeledTile(slide_uid, t.index, slide_class, extract_features(t)) for t in tiles]


def validation_results(predict: Callable[[np.ndarray], np.ndarray], slides: Sequence[ValidationSlide]) -> list[SlideResult]:
    results = []
    for slide in slides:
        if len(slide.features) == 0:
            continue
        probs = aggregate_slide(predict(np.asarray(slide.features)))
        results.append(SlideResult(slide.sop_instance_uid, slide.patient_id, slide.true_class,
                                   tuple(float(p) for p in probs), len(slide.features)))
    return results


class ReferenceClassifier(ClassifierMixin, BaseEstimator):
    """Softmax regression over tile features, fitted by mini-batch RMSProp.

    Weights start at zero.  Each epoch visits the samples in a Fisher-Yates
    order drawn from ``SplitMix64(seed ^ epoch)``.  When ``validation`` slides
    are given to :meth:`fit`, the parameters of the epoch with the best macro
    validation AUC are kept.
    """

    def __init__(self, epochs=5, batch_size=32, learning_rate=0.001, rho=0.9, epsilon=1e-7, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.rho = rho
        self.epsilon = epsilon
        self.seed = seed

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "ReferenceClassifier":
        return cls(cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.rmsprop_rho, cfg.rmsprop_epsilon, cfg.seed)

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        if y.dtype.kind in "iu":
            codes = y.astype(np.intp)
        else:
            lookup = {c: i for i, c in enumerate(CLASSES)}
            try:
                codes = np.array([lookup[str(v)] for v in y], dtype=np.intp)
            except KeyError as exc:
                raise EmptyClass(f"unknown label {exc.args[0]!r}") from None
        present = set(codes.tolist())
        missing = [CLASSES[i] for i in range(len(CLASSES)) if i not in present]
        if missing:
            raise EmptyClass(f"no training tiles for {', '.join(missing)}")
        return codes

    def fit(self, X, y, validation: Optional[Sequence[ValidationSlide]] = None):
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.rho, self.epsilon, self.seed)
        X, y = check_X_y(X, y, dtype=np.float64) if len(X) else (np.empty((0, N_FEATURES)), np.asarray(y))
        codes = self._encode(y)
        onehot = np.eye(len(CLASSES))[codes]
        self.classes_ = np.array(CLASSES)
        self.n_features_in_ = X.shape[1]

        weights = np.zeros((len(CLASSES), X.shape[1]))
        bias = np.zeros(len(CLASSES))
        acc_w, acc_b = np.zeros_like(weights), np.zeros_like(bias)
        history: list[EpochMetrics] = []
        snapshots: list[ReferenceModel] = []
        n = X.shape[0]
        for epoch in range(cfg.epochs):
            order = fisher_yates(list(range(n)), SplitMix64(cfg.seed ^ epoch))
            # Overflow is caught below as DivergedLoss, so silence numpy's warnings.
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                for start in range(0, n, cfg.batch_size):
                    batch = order[start : start + cfg.batch_size]
                    _, grad_w, grad_b = cross_entropy(weights, bias, X[batch], onehot[batch])
                    weights, acc_w = rmsprop_step(weights, grad_w, acc_w, cfg.learning_rate, cfg.rmsprop_rho,
                                                  cfg.rmsprop_epsilon)
                    bias, acc_b = rmsprop_step(bias, grad_b, acc_b, cfg.learning_rate, cfg.rmsprop_rho,
                                               cfg.rmsprop_epsilon)
                loss, _, _ = cross_entropy(weights, bias, X, onehot)
            if not math.isfinite(loss) or not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
                raise DivergedLoss(epoch, loss)
            snapshot = ReferenceModel(weights, bias)
            macro, per_class = float("nan"), (float("nan"),) * 3
            if validation:
                macro, per_class = macro_auc(validation_results(lambda f: predict_features(snapshot, f), validation))
            history.append(EpochMetrics(epoch, float(loss), macro, per_class))
            snapshots.append(snapshot)

        self.history_ = history
        self.best_epoch_ = select_best_epoch(history)
        self.model_ = snapshots[self.best_epoch_]
        self.coef_ = np.array(self.model_.weights)
        self.intercept_ = np.array(self.model_.bias)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return predict_features(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def train_reference(train_tiles: Sequence[LabeledTile], val_slides: Sequence[ValidationSlide],
                    cfg: TrainConfig) -> tuple[ReferenceModel, list[EpochMetrics]]:
    """Fit the reference model; tiles are first put in (slide uid, tile index) order."""
    ordered = sorted(train_tiles, key=lambda t: (t.slide_uid, t.tile_index))
    if not ordered:
        raise EmptyClass("no training tiles")
    X = np.stack([t.features for t in ordered])
    y = [t.label for t in ordered]
    clf = ReferenceClassifier.from_config(cfg).fit(X, y, validation=val_slides)
    return clf.model_, clf.history_
