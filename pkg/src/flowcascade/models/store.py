"""Portable JSON model files.

Schema (format_version 1):

    {
      "format_version": 1,
      "family": "decision_tree" | "boosted_trees",
      "n_classes": int, "packet_depth": int, "input_width": int,
      "params": {...family hyperparameters...},
      "metadata": {...free-form provenance, e.g. config_hash...},
      "trees": ...
    }

A tree is a list of nodes; node 0 is the root.  Internal nodes are
{"feature": int, "threshold": float, "left": int, "right": int}; leaves carry
the payload: {"proba": [...]} for decision trees, {"value": float} for boosted
regression trees.  decision_tree stores one tree; boosted_trees stores one
list of per-class trees per round.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict

import numpy as np

from .boosting import BoostedTreesConfig, BoostedTreesModel, RegressionTree
from .tree import DecisionTreeModel

MODEL_FORMAT_VERSION = 1


class ModelFormatError(Exception):
    pass


def _nodes_out(feature, threshold, left, right, payload_key, payload):
    nodes = []
    for i in range(len(feature)):
        if left[i] < 0:
            nodes.append({payload_key: payload(i)})
        else:
            nodes.append({
                "feature": int(feature[i]),
                "threshold": float(threshold[i]),
                "left": int(left[i]),
                "right": int(right[i]),
            })
    return nodes


def save_model(model, path, metadata: dict | None = None) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "family": model.family,
        "n_classes": model.n_classes,
        "packet_depth": model.packet_depth,
        "input_width": model.input_width,
        "metadata": metadata or {},
    }
    if isinstance(model, DecisionTreeModel):
        doc["params"] = {"min_samples_leaf": model.min_samples_leaf}
        doc["trees"] = [_nodes_out(model.feature, model.threshold, model.left, model.right,
                                   "proba", lambda i: [float(p) for p in model.leaf_proba[i]])]
    elif isinstance(model, BoostedTreesModel):
        doc["params"] = asdict(model.config)
        doc["trees"] = [
            [_nodes_out(t.feature, t.threshold, t.left, t.right, "value", lambda i, t=t: float(t.value[i]))
             for t in round_trees]
            for round_trees in model.trees
        ]
    else:
        raise ModelFormatError(f"cannot serialize model family {model.family!r}")
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def _nodes_in(nodes, payload_key, n_classes):
    size = len(nodes)
    feature = np.full(size, -1, dtype=np.int32)
    threshold = np.zeros(size, dtype=np.float64)
    left = np.full(size, -1, dtype=np.int32)
    right = np.full(size, -1, dtype=np.int32)
    payloads = {}
    for i, node in enumerate(nodes):
        if payload_key in node:
            payloads[i] = node[payload_key]
        else:
            try:
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                left[i] = node["left"]
                right[i] = node["right"]
            except (KeyError, TypeError) as exc:
                raise ModelFormatError(f"malformed node {i}: {node!r}") from exc
            if not math.isfinite(threshold[i]):
                raise ModelFormatError(f"non-finite threshold at node {i}")
            if not (0 <= left[i] < size and 0 <= right[i] < size):
                raise ModelFormatError(f"child index out of range at node {i}")
    return feature, threshold, left, right, payloads


def _check_finite(values, what):
    for v in values:
        if not math.isfinite(v):
            raise ModelFormatError(f"non-finite {what}")


def load_model(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: not a valid model file: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: not a model document")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format_version {version!r}")
    try:
        family = doc["family"]
        n_classes = int(doc["n_classes"])
        packet_depth = int(doc["packet_depth"])
        input_width = int(doc["input_width"])
        trees = doc["trees"]
        params = doc.get("params", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: missing or malformed field: {exc}") from exc

    if family == "decision_tree":
        if len(trees) != 1:
            raise ModelFormatError(f"{path}: decision_tree must contain exactly one tree")
        feature, threshold, left, right, payloads = _nodes_in(trees[0], "proba", n_classes)
        leaf_proba = np.zeros((len(trees[0]), n_classes), dtype=np.float64)
        for i, proba in payloads.items():
            if len(proba) != n_classes:
                raise ModelFormatError(f"{path}: leaf {i} probability width mismatch")
            _check_finite(proba, "leaf probability")
            leaf_proba[i] = proba
        return DecisionTreeModel(
            n_classes=n_classes, packet_depth=packet_depth, input_width=input_width,
            feature=feature, threshold=threshold, left=left, right=right,
            leaf_proba=leaf_proba, min_samples_leaf=int(params.get("min_samples_leaf", 1)),
        )

    if family == "boosted_trees":
        try:
            config = BoostedTreesConfig(**params)
        except TypeError as exc:
            raise ModelFormatError(f"{path}: bad boosted_trees params: {exc}") from exc
        rounds = []
        for round_nodes in trees:
            if len(round_nodes) != n_classes:
                raise ModelFormatError(f"{path}: round does not hold one tree per class")
            round_trees = []
            for nodes in round_nodes:
                feature, threshold, left, right, payloads = _nodes_in(nodes, "value", n_classes)
                value = np.zeros(len(nodes), dtype=np.float64)
                for i, v in payloads.items():
                    if not math.isfinite(v):
                        raise ModelFormatError(f"{path}: non-finite leaf value")
                    value[i] = v
                round_trees.append(RegressionTree(feature, threshold, left, right, value))
            rounds.append(round_trees)
        return BoostedTreesModel(
            n_classes=n_classes, packet_depth=packet_depth, input_width=input_width,
            trees=rounds, config=config,
        )

    raise ModelFormatError(f"{path}: unknown family {family!r}")
