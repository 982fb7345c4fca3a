"""CART-style decision tree over ternary {-1, 0, 1} header-bit features.

Splits are axis-aligned with the two thresholds that matter for ternary data
(-0.5 and 0.5), chosen by Gini impurity.  A node keeps splitting while it is
impure and some split leaves both children with at least min_samples_leaf
samples; leaves store empirical class frequencies, which are the prediction
probabilities.
"""

from __future__ import annotations

import numpy as np

from .base import ClassifierModel, check_labels, check_ternary

_THRESHOLDS = (-0.5, 0.5)


def traverse(feature: np.ndarray, threshold: np.ndarray, left: np.ndarray,
             right: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Vectorized routing of every row of X to its leaf node id.

    Comparisons are exact, so batched and row-at-a-time evaluation always agree.
    """
    node = np.zeros(X.shape[0], dtype=np.int32)
    while True:
        inner = np.flatnonzero(left[node] >= 0)
        if inner.size == 0:
            return node
        cur = node[inner]
        go_left = X[inner, feature[cur]] <= threshold[cur]
        node[inner] = np.where(go_left, left[cur], right[cur])


def traverse_row(feature, threshold, left, right, x) -> int:
    i = 0
    while left[i] >= 0:
        i = left[i] if x[feature[i]] <= threshold[i] else right[i]
    return int(i)


class DecisionTreeModel(ClassifierModel):
    family = "decision_tree"

    def __init__(self, n_classes, packet_depth, input_width, feature, threshold,
                 left, right, leaf_proba, min_samples_leaf: int):
        super().__init__(n_classes, packet_depth, input_width)
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.leaf_proba = np.asarray(leaf_proba, dtype=np.float64)
        self.min_samples_leaf = min_samples_leaf

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def proba_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        leaves = traverse(self.feature, self.threshold, self.left, self.right, X)
        return self.leaf_proba[leaves]

    def _proba_row(self, x: np.ndarray) -> np.ndarray:
        return self.leaf_proba[traverse_row(self.feature, self.threshold, self.left, self.right, x)]


class _TreeBuilder:
    def __init__(self):
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.proba = []

    def new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.proba.append(None)
        return len(self.feature) - 1


def _best_gini_split(Xf, Xa, Y, idx, counts, min_samples_leaf):
    """Best (local_feature, threshold) by Gini over the node's samples, or None.

    Per-value class counts come from two matmuls: with x in {-1,0,1},
    sum(x * onehot) and sum(|x| * onehot) recover the counts at each value.
    """
    n = idx.size
    Yi = Y[idx]
    M1 = Xf[idx].T @ Yi  # (d, C): per-feature sum of x per class
    M2 = Xa[idx].T @ Yi  # (d, C): per-feature sum of |x| per class
    cnt_neg = (M2 - M1) * 0.5
    left_counts = (cnt_neg, counts[None, :] - (M2 + M1) * 0.5 + cnt_neg)  # t=-0.5, t=0.5

    best = np.full((Xf.shape[1], 2), -np.inf, dtype=np.float64)
    for ti, L in enumerate(left_counts):
        L = L.astype(np.float64)
        R = counts[None, :] - L
        nl = L.sum(axis=1)
        nr = n - nl
        valid = (nl >= min_samples_leaf) & (nr >= min_samples_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            # maximizing sum(L^2)/nl + sum(R^2)/nr minimizes weighted Gini
            score = (L * L).sum(axis=1) / nl + (R * R).sum(axis=1) / nr
        best[:, ti] = np.where(valid, score, -np.inf)

    flat = best.reshape(-1)
    pick = int(np.argmax(flat))  # ties: lowest feature, then lower threshold
    if not np.isfinite(flat[pick]):
        return None
    return pick // 2, _THRESHOLDS[pick % 2]


def train_decision_tree(X, y, min_samples_leaf: int = 15, *, n_classes: int | None = None,
                        packet_depth: int = 1, feature_mask=None) -> DecisionTreeModel:
    if min_samples_leaf < 1:
        raise ValueError("min_samples_leaf must be >= 1")
    Xi = check_ternary(X)
    yi, n_classes = check_labels(y, n_classes)
    if len(Xi) != len(yi):
        raise ValueError("X and y length mismatch")
    n, width = Xi.shape
    cols = np.arange(width) if feature_mask is None else np.asarray(sorted(set(feature_mask)), dtype=np.int64)
    Xs = np.ascontiguousarray(Xi[:, cols])
    Xf = Xs.astype(np.float32)
    Xa = np.abs(Xf)
    Y = np.zeros((n, n_classes), dtype=np.float32)
    Y[np.arange(n), yi] = 1.0

    tree = _TreeBuilder()
    root = tree.new_node()
    stack = [(np.arange(n, dtype=np.int64), root)]
    while stack:
        idx, nid = stack.pop()
        counts = Y[idx].sum(axis=0)
        split = None
        if (counts > 0).sum() > 1 and idx.size >= 2 * min_samples_leaf:
            split = _best_gini_split(Xf, Xa, Y, idx, counts, min_samples_leaf)
        if split is None:
            tree.proba[nid] = counts.astype(np.float64) / idx.size
            continue
        local, thr = split
        tree.feature[nid] = int(cols[local])
        tree.threshold[nid] = thr
        mask = Xs[idx, local] <= thr
        left_id = tree.new_node()
        right_id = tree.new_node()
        tree.left[nid] = left_id
        tree.right[nid] = right_id
        stack.append((idx[~mask], right_id))
        stack.append((idx[mask], left_id))

    leaf_proba = np.zeros((len(tree.feature), n_classes), dtype=np.float64)
    for i, p in enumerate(tree.proba):
        if p is not None:
            leaf_proba[i] = p
    return DecisionTreeModel(
        n_classes=n_classes,
        packet_depth=packet_depth,
        input_width=width,
        feature=tree.feature,
        threshold=tree.threshold,
        left=tree.left,
        right=tree.right,
        leaf_proba=leaf_proba,
        min_samples_leaf=min_samples_leaf,
    )
