from .base import (
    PAD_VALUE,
    UNCERTAINTY_METRICS,
    ClassifierModel,
    Prediction,
    least_confidence,
    make_prediction,
    pad_features,
    prediction_entropy,
    uncertainty_scores,
)
from .boosting import (
    BoostedTreesConfig,
    BoostedTreesModel,
    multiclass_logloss,
    multiclass_logloss_gradient,
    softmax,
    train_boosted_trees,
)
from .store import MODEL_FORMAT_VERSION, ModelFormatError, load_model, save_model
from .tree import DecisionTreeModel, train_decision_tree

__all__ = [
    "PAD_VALUE",
    "UNCERTAINTY_METRICS",
    "ClassifierModel",
    "Prediction",
    "least_confidence",
    "make_prediction",
    "pad_features",
    "prediction_entropy",
    "uncertainty_scores",
    "BoostedTreesConfig",
    "BoostedTreesModel",
    "multiclass_logloss",
    "multiclass_logloss_gradient",
    "softmax",
    "train_boosted_trees",
    "MODEL_FORMAT_VERSION",
    "ModelFormatError",
    "load_model",
    "save_model",
    "DecisionTreeModel",
    "train_decision_tree",
]
