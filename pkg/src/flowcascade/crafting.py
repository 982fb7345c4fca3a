"""Offline model crafting: feature pruning, pool training/profiling, placement.

The pool trains one model per (family, packet depth), profiles each on the
validation split (support-weighted F1, median single-prediction latency, and an
end-to-end latency estimate that adds featurization plus the median wait for
that depth's packets), then picks the Pareto front and places the
fastest/fast/slow stages.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import FlowRecords, LabeledTrace, collection_wait_us, extract_flows, matrix_at_depth, split_indices
from .metrics import weighted_f1
from .models import BoostedTreesConfig, save_model, train_boosted_trees, train_decision_tree
from .packet_codec import decode_packet, read_capture

FAMILIES = ("dt", "gbt")


@dataclass
class FeatureMask:
    """Columns worth training on: non-constant and first of each duplicate group."""

    kept_columns: list[int]
    dropped_uniform: int
    dropped_duplicate: int
    width: int

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Blank dropped columns to -1, keeping the width (idempotent)."""
        X = np.asarray(X)
        out = np.full_like(X, -1)
        out[..., self.kept_columns] = X[..., self.kept_columns]
        return out

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "kept_columns": list(map(int, self.kept_columns)),
            "dropped_uniform": self.dropped_uniform,
            "dropped_duplicate": self.dropped_duplicate,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureMask":
        return cls(doc["kept_columns"], doc["dropped_uniform"], doc["dropped_duplicate"], doc["width"])


def prune_features(X: np.ndarray) -> FeatureMask:
    """Drop constant columns, then all but the lowest-index copy of duplicates."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training matrix must be non-empty and 2-D")
    n, d = X.shape
    constant = (X == X[0]).all(axis=0)
    n_uniform = int(constant.sum())
    if n_uniform == d:
        raise ValueError("degenerate dataset: every column is constant")

    cols = np.ascontiguousarray(X.T)
    kept: list[int] = []
    n_duplicate = 0
    seen: dict[bytes, int] = {}
    for j in range(d):
        if constant[j]:
            continue
        digest = cols[j].tobytes()
        if digest in seen:
            n_duplicate += 1
        else:
            seen[digest] = j
            kept.append(j)
    return FeatureMask(kept, n_uniform, n_duplicate, d)


@dataclass
class ModelProfile:
    model_id: str
    family: str
    packet_depth: int
    f1_weighted: float
    median_inference_latency_us: float
    median_e2e_latency_us: float
    failed: bool = False
    error: Optional[str] = None
    model: object = field(default=None, repr=False, compare=False)
    path: Optional[str] = None

    def row(self) -> dict:
        return {
            "model_id": self.model_id, "family": self.family, "packet_depth": self.packet_depth,
            "f1_weighted": round(self.f1_weighted, 6),
            "median_inference_latency_us": round(self.median_inference_latency_us, 3),
            "median_e2e_latency_us": round(self.median_e2e_latency_us, 3),
            "failed": self.failed, "error": self.error or "",
        }


def _median_predict_us(model, X: np.ndarray, n_samples: int) -> float:
    rows = [np.ascontiguousarray(X[i % len(X)]) for i in range(n_samples)]
    times = np.empty(n_samples)
    for i, row in enumerate(rows):
        t0 = time.perf_counter_ns()
        model.predict_proba(row)
        times[i] = time.perf_counter_ns() - t0
    return float(np.median(times) / 1000.0)


def measure_featurization_us(capture_path, link_type=None, n_packets: int = 256) -> float:
    """Median decode_packet time over the first frames of a capture."""
    reader = read_capture(capture_path)
    frames = []
    for raw, _ in reader:
        frames.append(raw)
        if len(frames) >= n_packets:
            break
    link = link_type or reader.link_type
    reader.close()
    if not frames:
        return 0.0
    times = np.empty(len(frames))
    for i, raw in enumerate(frames):
        t0 = time.perf_counter_ns()
        decode_packet(raw, link)
        times[i] = time.perf_counter_ns() - t0
    return float(np.median(times) / 1000.0)


def train_pool(trace: LabeledTrace, families=FAMILIES, depths=(1,), *, seed: int = 0,
               dt_min_samples_leaf: int = 15, gbt_config: BoostedTreesConfig | None = None,
               records: FlowRecords | None = None, n_latency_samples: int = 1000,
               out_dir=None, metadata: dict | None = None) -> list[ModelProfile]:
    depths = sorted(set(depths))
    if records is None:
        records = extract_flows(trace, max_depth=max(depths))
    labeled = np.flatnonzero(records.labels >= 0)
    if labeled.size == 0:
        raise ValueError("trace has no labeled flows")
    train_i, val_i, _ = (labeled[ix] for ix in split_indices(labeled.size, seed))
    featurize_us = measure_featurization_us(trace.capture)
    n_classes = trace.n_classes

    profiles: list[ModelProfile] = []
    masks: dict[int, FeatureMask] = {}
    for depth in depths:
        X = matrix_at_depth(records, depth)
        y = records.labels
        mask = prune_features(X[train_i])
        masks[depth] = mask
        wait_us = float(np.median(collection_wait_us(records, depth)[labeled]))
        for family in families:
            model_id = f"{family}_d{depth}"
            try:
                if family == "dt":
                    model = train_decision_tree(X[train_i], y[train_i], dt_min_samples_leaf,
                                                n_classes=n_classes, packet_depth=depth,
                                                feature_mask=mask.kept_columns)
                elif family == "gbt":
                    model = train_boosted_trees(X[train_i], y[train_i], gbt_config,
                                                n_classes=n_classes, packet_depth=depth,
                                                feature_mask=mask.kept_columns)
                else:
                    raise ValueError(f"unknown family {family!r}")
                f1 = weighted_f1(y[val_i], model.predict_batch(X[val_i]), n_classes)
                infer_us = _median_predict_us(model, X[val_i], n_latency_samples)
                e2e_us = infer_us + featurize_us * depth + wait_us
                profiles.append(ModelProfile(model_id, family, depth, f1, infer_us, e2e_us, model=model))
            except Exception as exc:  # a failed training leaves a marked profile, pool continues
                profiles.append(ModelProfile(model_id, family, depth, 0.0, 0.0, 0.0,
                                             failed=True, error=str(exc)))
    if out_dir is not None:
        _write_pool_artifacts(Path(out_dir), profiles, masks, metadata)
    return profiles


def _write_pool_artifacts(out_dir: Path, profiles, masks, metadata=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for depth, mask in masks.items():
        (out_dir / f"mask_d{depth}.json").write_text(json.dumps(mask.to_json()))
    for profile in profiles:
        if not profile.failed and profile.model is not None:
            path = out_dir / f"{profile.model_id}.model.json"
            save_model(profile.model, path, metadata=metadata)
            profile.path = str(path)
    with open(out_dir / "profiles.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(profiles[0].row()))
        writer.writeheader()
        for profile in profiles:
            writer.writerow(profile.row())


def pareto_front(profiles) -> list[ModelProfile]:
    """Profiles not dominated in (higher F1, lower e2e latency), latency ascending."""
    live = [p for p in profiles if not p.failed]
    if not live:
        raise ValueError("no valid profiles")
    front = []
    for p in live:
        dominated = any(
            q is not p
            and q.f1_weighted >= p.f1_weighted
            and q.median_e2e_latency_us <= p.median_e2e_latency_us
            and (q.f1_weighted > p.f1_weighted or q.median_e2e_latency_us < p.median_e2e_latency_us)
            for q in live
        )
        if not dominated:
            front.append(p)
    return sorted(front, key=lambda p: (p.median_e2e_latency_us, -p.f1_weighted))


@dataclass
class PlacementConfig:
    f1_floor: float = 0.8
    slow_gain_per_packet: float = 0.002
    stage_f1_gap: float = 0.005
    stage_latency_ratio: float = 1.5


@dataclass
class CascadePlan:
    fastest: Optional[ModelProfile]
    fast: Optional[ModelProfile]
    slow: Optional[ModelProfile]
    warnings: list[str] = field(default_factory=list)

    def stages(self) -> list[ModelProfile]:
        return [p for p in (self.fastest, self.fast, self.slow) if p is not None]

    def to_json(self) -> dict:
        def ref(p):
            return None if p is None else {"model_id": p.model_id, "path": p.path,
                                           "f1_weighted": p.f1_weighted,
                                           "median_e2e_latency_us": p.median_e2e_latency_us}
        return {"fastest": ref(self.fastest), "fast": ref(self.fast), "slow": ref(self.slow),
                "warnings": self.warnings}


def place_models(front, full_profiles, config: PlacementConfig | None = None) -> CascadePlan:
    """Assign fastest/fast/slow stages from the profile pool.

    fastest: lowest-latency depth-1 front member with F1 above the floor.
    fast: best-F1 depth-1 model.  slow: best model at the depth where marginal
    F1 gain per extra packet falls below the configured threshold.  A stage is
    omitted when it adds too little F1 or too little latency separation.
    """
    cfg = config or PlacementConfig()
    live = [p for p in full_profiles if not p.failed]
    warnings = []

    by_depth: dict[int, ModelProfile] = {}
    for p in live:
        best = by_depth.get(p.packet_depth)
        if best is None or p.f1_weighted > best.f1_weighted:
            by_depth[p.packet_depth] = p
    depths = sorted(by_depth)
    slow_depth = depths[-1]
    for d, d_next in zip(depths, depths[1:]):
        gain = (by_depth[d_next].f1_weighted - by_depth[d].f1_weighted) / (d_next - d)
        if gain < cfg.slow_gain_per_packet:
            slow_depth = d
            break
    slow = by_depth[slow_depth]

    depth1_front = [p for p in front if p.packet_depth == 1 and p.f1_weighted >= cfg.f1_floor]
    if not depth1_front:
        warnings.append(f"no depth-1 model reaches the F1 floor {cfg.f1_floor}; "
                        "degenerating to single-model serving")
        return CascadePlan(fastest=None, fast=None, slow=slow, warnings=warnings)
    fastest = min(depth1_front, key=lambda p: p.median_e2e_latency_us)

    depth1 = [p for p in live if p.packet_depth == 1]
    fast = max(depth1, key=lambda p: p.f1_weighted)

    def keeps_stage(prev: ModelProfile, nxt: ModelProfile) -> bool:
        if nxt.model_id == prev.model_id:
            return False
        gap = nxt.f1_weighted - prev.f1_weighted
        ratio = nxt.median_e2e_latency_us / max(prev.median_e2e_latency_us, 1e-9)
        return gap >= cfg.stage_f1_gap and ratio >= cfg.stage_latency_ratio

    plan_fast = fast if keeps_stage(fastest, fast) else None
    prev = plan_fast or fastest
    plan_slow = slow if keeps_stage(prev, slow) else None
    if plan_fast is None and fast.model_id != fastest.model_id:
        warnings.append(f"fast stage {fast.model_id} omitted (insufficient F1 gap or latency separation)")
    if plan_slow is None and slow.model_id != prev.model_id:
        warnings.append(f"slow stage {slow.model_id} omitted (insufficient F1 gap or latency separation)")
    return CascadePlan(fastest=fastest, fast=plan_fast, slow=plan_slow, warnings=warnings)
