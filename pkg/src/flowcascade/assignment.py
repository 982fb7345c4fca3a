"""Escalation policies: decide which predictions move to the next, slower model.

Two calibrated families are servable: a universal uncertainty threshold
(quantile of the validation uncertainty distribution) and per-class thresholds
built by greedily applying the per-class quantile increments with the best
incorrect-per-assigned slope.  Oracle and Random exist as evaluation-only
baselines.  Escalation always uses a strict comparison: uncertainty > threshold.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .metrics import weighted_f1

DEFAULT_QUANTILE_GRID = tuple(round(q * 0.01, 2) for q in range(1, 100))


@dataclass(frozen=True)
class ValidationPoint:
    uncertainty: float
    predicted_class: int
    correct: bool


@dataclass(frozen=True)
class CalibrationPoint:
    """One validation flow with everything needed to simulate escalation."""

    uncertainty: float
    fast_label: int
    slow_label: int
    true_label: int

    @property
    def predicted_class(self) -> int:
        return self.fast_label

    @property
    def correct(self) -> bool:
        return self.fast_label == self.true_label


class PolicyKind(Enum):
    UNIVERSAL = "universal"
    PER_CLASS = "per_class"
    RANDOM = "random"
    ORACLE = "oracle"


@dataclass
class ThresholdPolicy:
    kind: PolicyKind
    portion: float
    universal_threshold: Optional[float] = None  # None = never escalate
    per_class_thresholds: Optional[dict[int, float]] = None
    metric: str = "lc"
    seed: int = 0
    escalate_all: bool = False
    warning: Optional[str] = None
    _oracle_incorrect: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def evaluation_only(self) -> bool:
        return self.kind in (PolicyKind.RANDOM, PolicyKind.ORACLE)

    def escalate(self, uncertainty: float, predicted_class: int) -> bool:
        if self.kind is PolicyKind.UNIVERSAL:
            if self.universal_threshold is None:
                return False
            return uncertainty > self.universal_threshold
        if self.kind is PolicyKind.PER_CLASS:
            thr = self.per_class_thresholds.get(predicted_class)
            if thr is None:
                return False  # class unseen at calibration: keep the fast answer
            return uncertainty > thr
        raise ValueError(f"{self.kind.value} policy cannot serve online; it is evaluation-only")

    def escalate_mask(self, points: Sequence, portion: Optional[float] = None) -> np.ndarray:
        """Vectorized escalation decisions over validation/calibration points."""
        n = len(points)
        if self.kind is PolicyKind.ORACLE:
            incorrect = np.array([not p.correct for p in points], dtype=bool)
            if portion is None:
                return incorrect
            # escalate incorrect points first, then correct ones in index order
            order = np.lexsort((np.arange(n), ~incorrect))
            mask = np.zeros(n, dtype=bool)
            mask[order[: int(round(portion * n))]] = True
            return mask
        if self.kind is PolicyKind.RANDOM:
            p = self.portion if portion is None else portion
            return np.random.default_rng(self.seed).random(n) < p
        unc = np.array([p.uncertainty for p in points], dtype=np.float64)
        cls = np.array([p.predicted_class for p in points], dtype=np.int64)
        if self.kind is PolicyKind.UNIVERSAL:
            if self.universal_threshold is None:
                return np.zeros(n, dtype=bool)
            return unc > self.universal_threshold
        thr = np.array([self.per_class_thresholds.get(int(c), math.inf) for c in cls])
        return unc > thr

    def to_json(self) -> dict:
        doc = {
            "kind": self.kind.value,
            "portion": self.portion,
            "metric": self.metric,
            "seed": self.seed,
            "escalate_all": self.escalate_all,
            "warning": self.warning,
        }
        if self.kind is PolicyKind.UNIVERSAL:
            doc["universal_threshold"] = self.universal_threshold
        if self.kind is PolicyKind.PER_CLASS:
            doc["per_class_thresholds"] = {str(c): t for c, t in self.per_class_thresholds.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ThresholdPolicy":
        kind = PolicyKind(doc["kind"])
        per_class = doc.get("per_class_thresholds")
        return cls(
            kind=kind,
            portion=float(doc["portion"]),
            universal_threshold=doc.get("universal_threshold"),
            per_class_thresholds={int(c): float(t) for c, t in per_class.items()} if per_class else None,
            metric=doc.get("metric", "lc"),
            seed=int(doc.get("seed", 0)),
            escalate_all=bool(doc.get("escalate_all", False)),
            warning=doc.get("warning"),
        )


def save_policy(policy: ThresholdPolicy, path, metadata: dict | None = None) -> None:
    doc = policy.to_json()
    if metadata:
        doc["metadata"] = metadata
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_policy(path) -> ThresholdPolicy:
    with open(path) as fh:
        return ThresholdPolicy.from_json(json.load(fh))


def _quantile_value(sorted_values: np.ndarray, q: float) -> float:
    """The 1-based ceil(q * len) element, clamped into range."""
    n = len(sorted_values)
    idx = min(math.ceil(q * n), n) - 1
    return float(sorted_values[max(idx, 0)])


def universal_thresholds(points: Sequence, quantiles: Sequence[float] = DEFAULT_QUANTILE_GRID):
    """Uncertainty threshold at each quantile of the validation distribution.

    Escalating points with uncertainty strictly above the threshold at quantile
    q assigns approximately the top (1 - q) fraction.
    """
    if len(points) == 0:
        raise ValueError("validation set is empty")
    u = np.sort(np.array([p.uncertainty for p in points], dtype=np.float64))
    return [(float(q), _quantile_value(u, q)) for q in quantiles]


@dataclass(frozen=True)
class SlopeIncrement:
    """One step of lowering a class threshold to its next lower quantile."""

    predicted_class: int
    threshold: float
    newly_incorrect: int
    newly_total: int
    slope: float
    order: int  # position in the class's own high-to-low walk


def per_class_slope(points: Sequence, quantiles: Sequence[float] = DEFAULT_QUANTILE_GRID):
    """All per-class threshold increments, sorted by slope (incorrect share) descending.

    For each predicted class the walk starts at the class's maximum uncertainty
    (nothing escalated) and descends through the class's own uncertainty
    quantiles, ending with a terminal increment that captures the remainder.
    """
    by_class: dict[int, list] = {}
    for p in points:
        by_class.setdefault(p.predicted_class, []).append(p)

    records: list[SlopeIncrement] = []
    desc_quantiles = sorted(set(quantiles), reverse=True)
    for cls in sorted(by_class):
        members = by_class[cls]
        u = np.array([p.uncertainty for p in members], dtype=np.float64)
        incorrect = np.array([not p.correct for p in members], dtype=bool)
        order_idx = np.argsort(u, kind="stable")
        u_sorted = u[order_idx]
        inc_sorted = incorrect[order_idx]
        n = len(members)

        if n < 2:
            records.append(SlopeIncrement(
                predicted_class=cls, threshold=-1.0, newly_incorrect=int(inc_sorted.sum()),
                newly_total=n, slope=1.0 if inc_sorted.any() else 0.0, order=0,
            ))
            continue

        thresholds = [_quantile_value(u_sorted, q) for q in desc_quantiles]
        thresholds.append(-1.0)  # terminal step: escalate everything left
        prev = float(u_sorted[-1])  # start at the class maximum: nothing escalated
        captured = 0
        captured_incorrect = 0
        for order, thr in enumerate(thresholds):
            if thr > prev:
                thr = prev
            above = n - int(np.searchsorted(u_sorted, thr, side="right"))
            above_incorrect = int(inc_sorted[n - above:].sum()) if above else 0
            newly_total = above - captured
            newly_incorrect = above_incorrect - captured_incorrect
            slope = newly_incorrect / newly_total if newly_total > 0 else 0.0
            records.append(SlopeIncrement(cls, float(thr), newly_incorrect, newly_total, slope, order))
            captured = above
            captured_incorrect = above_incorrect
            prev = thr

    records.sort(key=lambda r: (-r.slope, r.predicted_class, r.order))
    return records


def per_class_thresholds(points: Sequence, target_portion: float,
                         quantiles: Sequence[float] = DEFAULT_QUANTILE_GRID,
                         metric: str = "lc") -> ThresholdPolicy:
    """Greedy max-slope threshold map reaching at least target_portion escalated.

    Increments are consumed from the slope-sorted record list through a
    max-slope queue; each step lowers one class's threshold to the increment's
    value, which also sweeps in any still-uncaptured slices above it.
    """
    if not 0.0 <= target_portion <= 1.0:
        raise ValueError("target_portion must be in [0, 1]")
    if len(points) == 0:
        raise ValueError("validation set is empty")
    records = per_class_slope(points, quantiles)

    # per class: candidate cuts (captured count, threshold) down the quantile
    # walk, plus prefix counts of incorrect points in descending-uncertainty order
    cuts: dict[int, list[tuple[int, float]]] = {}
    inc_prefix: dict[int, np.ndarray] = {}
    state: dict[int, int] = {}
    per_cls_points: dict[int, list] = {}
    for p in points:
        per_cls_points.setdefault(p.predicted_class, []).append(p)
    for cls, members in per_cls_points.items():
        u = np.array([p.uncertainty for p in members])
        wrong = np.array([not p.correct for p in members])
        order = np.argsort(-u, kind="stable")
        inc_prefix[cls] = np.concatenate([[0], np.cumsum(wrong[order])])
        u_sorted = np.sort(u)
        seen = set()
        cls_cuts = []
        for rec in sorted((r for r in records if r.predicted_class == cls), key=lambda r: r.order):
            count = len(u) - int(np.searchsorted(u_sorted, rec.threshold, side="right"))
            if count not in seen:
                seen.add(count)
                cls_cuts.append((count, rec.threshold))
        cuts[cls] = cls_cuts
        state[cls] = 0

    thresholds = {cls: float(max(p.uncertainty for p in members))
                  for cls, members in per_cls_points.items()}

    def best_next(cls: int):
        """Steepest remaining cut measured from the class's current position."""
        k = state[cls]
        prefix = inc_prefix[cls]
        best = None
        for count, threshold in cuts[cls]:
            if count <= k:
                continue
            slope = (prefix[count] - prefix[k]) / (count - k)
            if best is None or slope > best[0]:
                best = (slope, count, threshold)
        return best

    n = len(points)
    captured = 0
    heap = []
    for cls in sorted(cuts):
        nxt = best_next(cls)
        if nxt:
            heapq.heappush(heap, (-nxt[0], cls, state[cls], nxt[1], nxt[2]))
    while captured / n < target_portion and heap:
        neg_slope, cls, k_then, count, threshold = heapq.heappop(heap)
        if state[cls] != k_then:  # stale: the class moved since this was queued
            nxt = best_next(cls)
            if nxt:
                heapq.heappush(heap, (-nxt[0], cls, state[cls], nxt[1], nxt[2]))
            continue
        # advance one quantile cut at a time so the realized portion keeps
        # the grid's granularity even when the chosen cut is several slices deep
        for step_count, step_threshold in cuts[cls]:
            if step_count <= state[cls]:
                continue
            captured += step_count - state[cls]
            state[cls] = step_count
            thresholds[cls] = step_threshold
            if step_count >= count or captured / n >= target_portion:
                break
        nxt = best_next(cls)
        if nxt:
            heapq.heappush(heap, (-nxt[0], cls, state[cls], nxt[1], nxt[2]))

    realized = captured / n
    warning = None
    if realized < target_portion:
        warning = f"target portion {target_portion} unreachable; escalating everything ({realized:.4f})"
    return ThresholdPolicy(
        kind=PolicyKind.PER_CLASS,
        portion=realized,
        per_class_thresholds=thresholds,
        metric=metric,
        escalate_all=warning is not None,
        warning=warning,
    )


def universal_policy(points: Sequence, portion: float,
                     quantiles: Sequence[float] = DEFAULT_QUANTILE_GRID,
                     metric: str = "lc") -> ThresholdPolicy:
    """Universal policy escalating approximately the requested portion."""
    if not 0.0 <= portion <= 1.0:
        raise ValueError("portion must be in [0, 1]")
    u = np.array([p.uncertainty for p in points], dtype=np.float64)
    if portion == 0.0:
        threshold = None
    elif portion == 1.0:
        threshold = -1.0
    else:
        threshold = _quantile_value(np.sort(u), 1.0 - portion)
    realized = float((u > threshold).mean()) if threshold is not None else 0.0
    return ThresholdPolicy(
        kind=PolicyKind.UNIVERSAL,
        portion=realized,
        universal_threshold=threshold,
        metric=metric,
    )


def oracle_policy(points: Sequence) -> ThresholdPolicy:
    """Evaluation-only: escalate exactly the incorrect points."""
    incorrect = np.array([not p.correct for p in points], dtype=bool)
    return ThresholdPolicy(
        kind=PolicyKind.ORACLE,
        portion=float(incorrect.mean()),
        _oracle_incorrect=incorrect,
    )


def random_policy(portion: float, seed: int = 0) -> ThresholdPolicy:
    if not 0.0 <= portion <= 1.0:
        raise ValueError("portion must be in [0, 1]")
    return ThresholdPolicy(kind=PolicyKind.RANDOM, portion=portion, seed=seed)


def simulated_f1(points: Sequence[CalibrationPoint], mask: np.ndarray, n_classes: int | None = None) -> float:
    """End-to-end weighted F1 when the masked points take the slow model's label."""
    truth = np.array([p.true_label for p in points], dtype=np.int64)
    fast = np.array([p.fast_label for p in points], dtype=np.int64)
    slow = np.array([p.slow_label for p in points], dtype=np.int64)
    final = np.where(mask, slow, fast)
    return weighted_f1(truth, final, n_classes)


def build_policy(points: Sequence, kind: str, portion: float,
                 quantiles: Sequence[float] = DEFAULT_QUANTILE_GRID,
                 metric: str = "lc", seed: int = 0) -> ThresholdPolicy:
    if kind == "universal":
        return universal_policy(points, portion, quantiles, metric)
    if kind == "per_class":
        return per_class_thresholds(points, portion, quantiles, metric)
    if kind == "oracle":
        return oracle_policy(points)
    if kind == "random":
        return random_policy(portion, seed)
    raise ValueError(f"unknown policy kind {kind!r}")


@dataclass
class PolicySweep:
    portions: list[float]
    f1: list[float]
    policy_portions: list[float]  # realized assigned fraction on the calibration set


@dataclass
class PolicyChoice:
    policy: ThresholdPolicy
    sweep: PolicySweep


def sweep_portions(quantiles: Sequence[float] = DEFAULT_QUANTILE_GRID) -> list[float]:
    inner = sorted({round(1.0 - q, 10) for q in quantiles})
    return [0.0] + inner + [1.0]


def choose_policy(points: Sequence[CalibrationPoint], mode: str = "pareto_knee", *,
                  target: float | None = None, kind: str = "universal",
                  quantiles: Sequence[float] = DEFAULT_QUANTILE_GRID,
                  metric: str = "lc", knee_tolerance: float = 0.002,
                  n_classes: int | None = None) -> PolicyChoice:
    """Calibrate the escalation portion by sweeping the end-to-end F1 curve.

    Modes: "pareto_knee" picks the smallest portion within knee_tolerance of
    the sweep maximum; "target_portion" returns the policy at the requested
    portion; "target_f1" picks the smallest portion reaching the target F1 and
    raises (naming the best achievable value) if none does.
    """
    if len(points) == 0:
        raise ValueError("calibration set is empty")
    portions = sweep_portions(quantiles)
    policies = [build_policy(points, kind, p, quantiles, metric) for p in portions]
    f1s = [simulated_f1(points, pol.escalate_mask(points), n_classes) for pol in policies]
    sweep = PolicySweep(portions=portions, f1=f1s, policy_portions=[pol.portion for pol in policies])

    if mode == "pareto_knee":
        best = max(f1s)
        idx = next(i for i, v in enumerate(f1s) if v >= best - knee_tolerance)
    elif mode == "target_portion":
        if target is None:
            raise ValueError("target_portion mode needs a target")
        idx = int(np.argmin([abs(p - target) for p in portions]))
    elif mode == "target_f1":
        if target is None:
            raise ValueError("target_f1 mode needs a target")
        reachable = [i for i, v in enumerate(f1s) if v >= target]
        if not reachable:
            raise ValueError(f"target F1 {target} unreachable; max achievable is {max(f1s):.4f}")
        idx = reachable[0]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return PolicyChoice(policy=policies[idx], sweep=sweep)


def read_validation_csv(path) -> list[ValidationPoint]:
    """CSV triples: uncertainty, predicted_class, correct (0/1 or true/false)."""
    points = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "uncertainty":
                continue
            correct = row[2].strip().lower() in ("1", "true", "yes")
            points.append(ValidationPoint(float(row[0]), int(row[1]), correct))
    return points


def build_calibration_points(fast_proba: np.ndarray, slow_labels, true_labels,
                             metric: str = "lc") -> list[CalibrationPoint]:
    """Assemble calibration triples from upstream probabilities and downstream labels."""
    from .models import uncertainty_scores

    unc = uncertainty_scores(fast_proba, metric)
    fast_labels = np.argmax(fast_proba, axis=1)
    return [
        CalibrationPoint(float(u), int(f), int(s), int(t))
        for u, f, s, t in zip(unc, fast_labels, slow_labels, true_labels)
    ]
