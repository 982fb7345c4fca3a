"""Leaf-wise gradient-boosted regression trees with softmax multiclass linkage.

Each round fits one regression tree per class to the multiclass log-loss
gradients (Newton steps: leaf value = -G/(H+eps)).  Trees grow leaf-wise,
always splitting the leaf with the largest gain, up to num_leaves leaves with
at least min_data_in_leaf samples per leaf; each tree samples
ceil(feature_fraction * d) candidate features without replacement.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .base import ClassifierModel, check_labels, check_ternary
from .tree import traverse, traverse_row

_EPS = 1e-6


@dataclass(frozen=True)
class BoostedTreesConfig:
    learning_rate: float = 0.03
    num_leaves: int = 128
    feature_fraction: float = 0.9
    min_data_in_leaf: int = 3
    n_rounds: int = 100
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.learning_rate:
            raise ValueError("learning_rate must be positive")
        if self.num_leaves < 1:
            raise ValueError("num_leaves must be >= 1")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("feature_fraction must be in (0, 1]")
        if self.min_data_in_leaf < 1:
            raise ValueError("min_data_in_leaf must be >= 1")
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")


def softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def multiclass_logloss_gradient(scores: np.ndarray, label: int) -> np.ndarray:
    """d/dscores of -log softmax(scores)[label], i.e. softmax(scores) - onehot(label)."""
    g = softmax(np.asarray(scores, dtype=np.float64))
    g[..., label] -= 1.0
    return g


def multiclass_logloss(scores: np.ndarray, y: np.ndarray) -> float:
    p = softmax(scores)
    rows = np.arange(len(y))
    return float(-np.mean(np.log(np.maximum(p[rows, y], 1e-300))))


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[traverse(self.feature, self.threshold, self.left, self.right, X)]

    def predict_row(self, x: np.ndarray) -> float:
        return float(self.value[traverse_row(self.feature, self.threshold, self.left, self.right, x)])


def _rows(M: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return M if idx.size == M.shape[0] else M[idx]


class _Leaf:
    __slots__ = ("idx", "sx", "sa", "node_id", "split")

    def __init__(self, idx, sx, sa, node_id):
        self.idx = idx
        self.sx = sx  # (3, d) sums of (g, h, 1) * x
        self.sa = sa  # (3, d) sums of (g, h, 1) * |x|
        self.node_id = node_id
        self.split = None  # (gain, column, threshold)


def _best_split(leaf: _Leaf, total, sampled: np.ndarray, min_leaf: int):
    """Largest-gain (gain, column, threshold) among sampled columns, or None.

    With x in {-1,0,1}, per-value sums of (g, h, 1) fall out of the x and |x|
    moment sums, giving both candidate thresholds from two matmuls per leaf.
    """
    g_tot, h_tot, n_tot = (float(t) for t in total)
    if n_tot < 2 * min_leaf:
        return None
    neg = (leaf.sa - leaf.sx) * 0.5                       # x == -1
    nonpos = total[:, None] - (leaf.sa + leaf.sx) * 0.5   # x in {-1, 0}
    parent = g_tot * g_tot / (h_tot + _EPS)
    best = None
    for thr, L in ((-0.5, neg), (0.5, nonpos)):
        GL = L[0].astype(np.float64)
        HL = L[1].astype(np.float64)
        NL = L[2]
        NR = n_tot - NL
        valid = sampled & (NL >= min_leaf) & (NR >= min_leaf)
        if not valid.any():
            continue
        GR = g_tot - GL
        HR = h_tot - HL
        gain = GL * GL / (HL + _EPS) + GR * GR / (HR + _EPS) - parent
        gain = np.where(valid, gain, -np.inf)
        j = int(np.argmax(gain))  # ties: lowest column, -0.5 before 0.5
        if gain[j] > 1e-12 and (best is None or gain[j] > best[0]):
            best = (float(gain[j]), j, thr)
    return best


def _grow_tree(Xs, XF, XA, g, h, cfg: BoostedTreesConfig, sampled, global_cols):
    """One leaf-wise regression tree; returns (RegressionTree, per-sample values)."""
    n = Xs.shape[0]
    A = np.stack([g, h, np.ones(n)], axis=1).astype(np.float32)

    def leaf_stats(idx):
        Ai = _rows(A, idx).T
        return Ai @ _rows(XF, idx), Ai @ _rows(XA, idx)

    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    out = np.zeros(n, dtype=np.float64)

    root_idx = np.arange(n, dtype=np.int64)
    sx, sa = leaf_stats(root_idx)
    root = _Leaf(root_idx, sx, sa, 0)
    root.split = _best_split(root, A.sum(axis=0, dtype=np.float64), sampled, cfg.min_data_in_leaf)

    heap = []
    seq = 0
    if root.split is not None:
        heapq.heappush(heap, (-root.split[0], seq, root))
    leaves = [root]
    n_leaves = 1
    while n_leaves < cfg.num_leaves and heap:
        _, _, leaf = heapq.heappop(heap)
        _, col, thr = leaf.split
        mask = Xs[leaf.idx, col] <= thr
        idx_l = leaf.idx[mask]
        idx_r = leaf.idx[~mask]

        nid = leaf.node_id
        feature[nid] = int(global_cols[col])
        threshold[nid] = thr
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
        left[nid] = len(feature) - 2
        right[nid] = len(feature) - 1

        # histogram subtraction: compute the smaller child, derive the sibling
        if idx_l.size <= idx_r.size:
            sx_l, sa_l = leaf_stats(idx_l)
            sx_r, sa_r = leaf.sx - sx_l, leaf.sa - sa_l
        else:
            sx_r, sa_r = leaf_stats(idx_r)
            sx_l, sa_l = leaf.sx - sx_r, leaf.sa - sa_r

        leaves.remove(leaf)
        for idx_c, sx_c, sa_c, node_c in ((idx_l, sx_l, sa_l, left[nid]), (idx_r, sx_r, sa_r, right[nid])):
            child = _Leaf(idx_c, sx_c, sa_c, node_c)
            totals = _rows(A, idx_c).sum(axis=0, dtype=np.float64)
            child.split = _best_split(child, totals, sampled, cfg.min_data_in_leaf)
            leaves.append(child)
            if child.split is not None:
                seq += 1
                heapq.heappush(heap, (-child.split[0], seq, child))
        n_leaves += 1

    for leaf in leaves:
        Ai = _rows(A, leaf.idx)
        G = float(Ai[:, 0].sum(dtype=np.float64))
        H = float(Ai[:, 1].sum(dtype=np.float64))
        v = -G / (H + _EPS)
        value[leaf.node_id] = v
        out[leaf.idx] = v

    tree = RegressionTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
    )
    return tree, out


class _FlatEnsemble:
    """All trees concatenated for vectorized one-row traversal.

    Scores accumulate round-by-round exactly like the per-tree loop, so the
    flat path is bit-identical to RegressionTree.predict_row sums.
    """

    def __init__(self, trees):
        feature, threshold, left, right, value, roots = [], [], [], [], [], []
        base = 0
        for round_trees in trees:
            for t in round_trees:
                n = len(t.feature)
                roots.append(base)
                feature.append(t.feature)
                threshold.append(t.threshold)
                left.append(np.where(t.left >= 0, t.left + base, -1))
                right.append(np.where(t.right >= 0, t.right + base, -1))
                value.append(t.value)
                base += n
        self.feature = np.concatenate(feature)
        self.threshold = np.concatenate(threshold)
        self.left = np.concatenate(left)
        self.right = np.concatenate(right)
        self.value = np.concatenate(value)
        self.roots = np.asarray(roots, dtype=np.int64)

    def leaf_values_row(self, x: np.ndarray) -> np.ndarray:
        cur = self.roots.copy()
        while True:
            f = self.feature[cur]
            m = f >= 0
            if not m.any():
                return self.value[cur]
            sub = cur[m]
            go_left = x[f[m]] <= self.threshold[sub]
            cur[m] = np.where(go_left, self.left[sub], self.right[sub])


class BoostedTreesModel(ClassifierModel):
    family = "boosted_trees"

    def __init__(self, n_classes, packet_depth, input_width, trees, config: BoostedTreesConfig):
        super().__init__(n_classes, packet_depth, input_width)
        self.trees = trees  # [round][class] -> RegressionTree
        self.config = config
        self._flat: Optional[_FlatEnsemble] = None

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def decision_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        scores = np.zeros((X.shape[0], self.n_classes), dtype=np.float64)
        lr = self.config.learning_rate
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                scores[:, c] += lr * tree.predict(X)
        return scores

    def staged_decision_scores(self, X: np.ndarray):
        """Cumulative scores after each round, in training order."""
        X = np.asarray(X)
        scores = np.zeros((X.shape[0], self.n_classes), dtype=np.float64)
        lr = self.config.learning_rate
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                scores[:, c] += lr * tree.predict(X)
            yield scores.copy()

    def proba_matrix(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.decision_scores(X))

    def _proba_row(self, x: np.ndarray) -> np.ndarray:
        if self.n_rounds == 0:
            return softmax(np.zeros(self.n_classes, dtype=np.float64))
        if self._flat is None:
            self._flat = _FlatEnsemble(self.trees)
        values = self._flat.leaf_values_row(np.asarray(x)).reshape(self.n_rounds, self.n_classes)
        scores = np.zeros(self.n_classes, dtype=np.float64)
        lr = self.config.learning_rate
        for round_values in values:
            scores += lr * round_values
        return softmax(scores)


def train_boosted_trees(X, y, config: Optional[BoostedTreesConfig] = None, *,
                        n_classes: int | None = None, packet_depth: int = 1,
                        feature_mask=None) -> BoostedTreesModel:
    cfg = config or BoostedTreesConfig()
    cfg.validate()
    Xi = check_ternary(X)
    yi, n_classes = check_labels(y, n_classes)
    if len(Xi) != len(yi):
        raise ValueError("X and y length mismatch")
    n, width = Xi.shape
    cols = np.arange(width) if feature_mask is None else np.asarray(sorted(set(feature_mask)), dtype=np.int64)
    Xs = np.ascontiguousarray(Xi[:, cols])
    d = Xs.shape[1]
    XF = Xs.astype(np.float32)
    XA = np.abs(XF)
    k_feat = max(1, math.ceil(cfg.feature_fraction * d))

    Y = np.zeros((n, n_classes), dtype=np.float64)
    Y[np.arange(n), yi] = 1.0
    scores = np.zeros((n, n_classes), dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)

    trees = []
    for _ in range(cfg.n_rounds):
        P = softmax(scores)
        G = P - Y
        H = P * (1.0 - P)
        round_trees = []
        for c in range(n_classes):
            sampled = np.zeros(d, dtype=bool)
            sampled[rng.choice(d, size=k_feat, replace=False)] = True
            tree, out = _grow_tree(Xs, XF, XA, G[:, c], H[:, c], cfg, sampled, cols)
            scores[:, c] += cfg.learning_rate * out
            round_trees.append(tree)
        trees.append(round_trees)

    return BoostedTreesModel(
        n_classes=n_classes,
        packet_depth=packet_depth,
        input_width=width,
        trees=trees,
        config=cfg,
    )
