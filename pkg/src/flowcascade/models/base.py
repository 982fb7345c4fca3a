"""Shared classifier surface: probability predictions and uncertainty scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNCERTAINTY_METRICS = ("lc", "entropy")

PAD_VALUE = -1  # mirrors the codec's ABSENT numeric


@dataclass(frozen=True)
class Prediction:
    label: int
    proba: np.ndarray
    uncertainty_lc: float
    uncertainty_entropy: float

    def uncertainty(self, metric: str = "lc") -> float:
        if metric == "lc":
            return self.uncertainty_lc
        if metric == "entropy":
            return self.uncertainty_entropy
        raise ValueError(f"unknown uncertainty metric {metric!r}")


def least_confidence(proba: np.ndarray) -> float:
    return float(1.0 - np.max(proba))


def prediction_entropy(proba: np.ndarray) -> float:
    p = np.asarray(proba, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def uncertainty_scores(proba: np.ndarray, metric: str = "lc") -> np.ndarray:
    """Vectorized uncertainty over a (n, C) probability matrix."""
    p = np.asarray(proba, dtype=np.float64)
    if metric == "lc":
        return 1.0 - p.max(axis=1)
    if metric == "entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
        return -terms.sum(axis=1)
    raise ValueError(f"unknown uncertainty metric {metric!r}")


def make_prediction(proba: np.ndarray) -> Prediction:
    p = np.asarray(proba, dtype=np.float64)
    # argmax ties break to the lowest class index for determinism
    return Prediction(int(np.argmax(p)), p, least_confidence(p), prediction_entropy(p))


def pad_features(x: np.ndarray, width: int) -> np.ndarray:
    """Right-pad a flow-ended-early vector with -1 up to the model input width."""
    x = np.asarray(x)
    if x.shape[-1] == width:
        return x
    if x.shape[-1] > width:
        raise ValueError(f"feature vector wider than model input ({x.shape[-1]} > {width})")
    pad_shape = x.shape[:-1] + (width - x.shape[-1],)
    return np.concatenate([x, np.full(pad_shape, PAD_VALUE, dtype=x.dtype)], axis=-1)


class ClassifierModel:
    """Immutable trained classifier; predict paths are safe for concurrent use."""

    family: str = "abstract"

    def __init__(self, n_classes: int, packet_depth: int, input_width: int):
        self.n_classes = n_classes
        self.packet_depth = packet_depth
        self.input_width = input_width

    def proba_matrix(self, X: np.ndarray) -> np.ndarray:
        """(n, input_width) features -> (n, n_classes) probabilities."""
        raise NotImplementedError

    def _proba_row(self, x: np.ndarray) -> np.ndarray:
        return self.proba_matrix(x[None, :])[0]

    def predict_proba(self, x: np.ndarray) -> Prediction:
        x = pad_features(np.asarray(x), self.input_width)
        if x.ndim != 1:
            raise ValueError("predict_proba takes a single feature vector")
        return make_prediction(self._proba_row(x))

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        """Labels only, for bulk scoring."""
        return np.argmax(self.proba_matrix(pad_features(np.asarray(X), self.input_width)), axis=1)


def check_ternary(X: np.ndarray) -> np.ndarray:
    """Validate and return the training matrix as int8 over {-1, 0, 1}."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("training matrix must be non-empty and 2-D")
    Xi = X.astype(np.int8, copy=False)
    if (Xi != X).any():
        raise ValueError("training features must be ternary {-1, 0, 1}")
    bad = (Xi < -1) | (Xi > 1)
    if bad.any():
        raise ValueError("training features must be ternary {-1, 0, 1}")
    return np.ascontiguousarray(Xi)


def check_labels(y, n_classes: int | None):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] == 0:
        raise ValueError("labels must be a non-empty 1-D array")
    yi = y.astype(np.int64, copy=False)
    if (yi != y).any() or yi.min() < 0:
        raise ValueError("labels must be non-negative integers")
    inferred = int(yi.max()) + 1
    if n_classes is None:
        n_classes = inferred
    elif inferred > n_classes:
        raise ValueError(f"label {yi.max()} out of range for n_classes={n_classes}")
    return yi, n_classes
