"""Replay, scoring, and assignment-curve measurement.

Replay paces packets by the capture's inter-arrival times (scaled by 1/speed;
speed=inf streams as fast as possible for max-service-rate runs) and can
replicate flows with rewritten five-tuples to reach a requested new-flow rate.
Scoring turns a serve run into the measurement suite: service rate, latency
quantiles, per-stage latency breakdown, miss rate, weighted F1 and the
decided-by histogram.
"""

from __future__ import annotations

import heapq
import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .assignment import (
    CalibrationPoint,
    build_policy,
    oracle_policy,
    simulated_f1,
    sweep_portions,
)
from .dataset import LabeledTrace
from .metrics import weighted_f1
from .packet_codec import TimedPacket, parse_packet, read_capture
from .pipeline import DecidedBy, ServeResult
from .synth import make_synthetic_benchmark  # re-exported: harness owns the benchmark

__all__ = [
    "Replayer", "replay", "score", "RunReport", "sweep_assignment", "SweepResult",
    "AssignmentCurve", "make_synthetic_benchmark", "build_stage_calibration",
]


def _patch_src_addr(raw: bytes, ip_off: int, replica: int) -> bytes:
    out = bytearray(raw)
    out[ip_off + 12] ^= replica & 0xFF
    return bytes(out)


class Replayer:
    """Paced packet source over a capture file.

    speed scales the original inter-arrival times (math.inf = as fast as
    possible).  target_rate replicates every flow ceil(target/native) times
    with rewritten source addresses and staggered start times; the realized
    rate is an integer multiple of the native one.
    """

    def __init__(self, capture_path, speed: float = 1.0, target_rate: Optional[float] = None,
                 limit_flows: Optional[int] = None):
        if speed <= 0:
            raise ValueError("speed must be positive (use math.inf for offline mode)")
        self.speed = speed
        reader = read_capture(capture_path)
        self.link_type = reader.link_type
        self.skipped_packets = 0
        self._packets: list[tuple[int, object, bytes, int]] = []  # (ts, key, raw, ip_off)
        flow_first: dict = {}
        for raw, ts_us in reader:
            parsed = parse_packet(raw, self.link_type)
            if parsed is None:
                self.skipped_packets += 1
                continue
            key, ip_off = parsed[0], parsed[1]
            if key not in flow_first:
                flow_first[key] = ts_us
            self._packets.append((ts_us, key, raw, ip_off))
        reader.close()
        if limit_flows is not None and len(flow_first) > limit_flows:
            keep = set(list(flow_first)[:limit_flows])
            self._packets = [p for p in self._packets if p[1] in keep]
            flow_first = {k: flow_first[k] for k in keep}
        self.native_flows = len(flow_first)
        if self._packets:
            span_us = max(self._packets[-1][0] - self._packets[0][0], 1)
            self.native_rate = self.native_flows / (span_us / 1e6)
        else:
            self.native_rate = 0.0
        self.replicas = 1
        if target_rate is not None and self.native_rate > 0:
            self.replicas = max(1, math.ceil(target_rate / self.native_rate))
            if self.replicas > 255:
                raise ValueError("target_rate would need more than 255 replicas")
        self.realized_rate = self.native_rate * self.replicas * (speed if math.isfinite(speed) else 1.0)
        self.pacing_errors_us: list[float] = []

    def _stream(self) -> Iterator[tuple[int, object, bytes]]:
        if self.replicas == 1:
            for ts, key, raw, _ in self._packets:
                yield ts, key, raw
            return
        stagger = (self._packets[-1][0] - self._packets[0][0]) // (self.native_flows * self.replicas) + 1

        def replica_stream(r):
            from .packet_codec import FlowKey

            shift = r * stagger
            for ts, key, raw, ip_off in self._packets:
                if r == 0:
                    yield ts, key, raw
                else:
                    new_key = FlowKey(key.src_addr ^ (r << 24), key.dst_addr,
                                      key.src_port, key.dst_port, key.protocol)
                    yield ts + shift, new_key, _patch_src_addr(raw, ip_off, r)

        yield from heapq.merge(*(replica_stream(r) for r in range(self.replicas)), key=lambda p: p[0])

    def packets(self) -> Iterator[TimedPacket]:
        self.pacing_errors_us = []
        paced = math.isfinite(self.speed)
        t0_capture = None
        t0_wall = time.perf_counter()
        # sleep-based pacing: precision is whatever the host timer gives (tens
        # of us on bare metal); spinning would be tighter but starves the
        # serving threads, so drift is measured and flagged instead
        for ts, key, raw in self._stream():
            if t0_capture is None:
                t0_capture = ts
            if paced:
                target = t0_wall + (ts - t0_capture) / 1e6 / self.speed
                now = time.perf_counter()
                if target > now:
                    time.sleep(target - now)
                    now = time.perf_counter()
                self.pacing_errors_us.append((now - target) * 1e6)
            yield TimedPacket(key, raw, self.link_type, ts, int(time.perf_counter() * 1e6))

    @property
    def pacing_error_p99_us(self) -> Optional[float]:
        if not self.pacing_errors_us:
            return None
        return float(np.percentile(self.pacing_errors_us, 99))

    @property
    def pacing_unreliable(self) -> bool:
        p99 = self.pacing_error_p99_us
        return p99 is not None and p99 > 1000.0


def replay(trace: LabeledTrace, speed: float = 1.0, target_rate: Optional[float] = None,
           limit_flows: Optional[int] = None) -> Replayer:
    return Replayer(trace.capture, speed=speed, target_rate=target_rate, limit_flows=limit_flows)


def _quantiles(values: Sequence[float]) -> dict:
    if not values:
        return {"p50": None, "p90": None, "p99": None, "mean": None}
    arr = np.asarray(values, dtype=np.float64)
    return {
        "p50": float(np.percentile(arr, 50)),
        "p90": float(np.percentile(arr, 90)),
        "p99": float(np.percentile(arr, 99)),
        "mean": float(arr.mean()),
    }


def _median(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


@dataclass
class RunReport:
    service_rate: float
    latency_quantiles_us: dict
    stage_latency_breakdown_us: dict
    miss_rate: float
    f1_weighted: Optional[float]
    decided_by_histogram: dict
    admitted_flows: int
    labeled_flows: int
    consumers: int
    duration_s: float
    q1_drops: int
    q3_drops: int
    purged_entries: int
    pacing_error_p99_us: Optional[float] = None
    pacing_unreliable: bool = False
    arrival_rate: Optional[float] = None
    config_hash: Optional[str] = None
    effective_config: Optional[dict] = None

    def to_json(self) -> dict:
        doc = dict(self.__dict__)
        return doc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def score(result: ServeResult, trace: Optional[LabeledTrace] = None, *,
          replayer: Optional[Replayer] = None, arrival_rate: Optional[float] = None,
          config_hash: Optional[str] = None, effective_config: Optional[dict] = None) -> RunReport:
    """Compute the full measurement suite for one serve run."""
    decided = result.decided
    histogram = {kind.value: count for kind, count in result.histogram().items()}
    dropped = histogram[DecidedBy.DROPPED.value]
    e2e = [o.e2e_us for o in decided if o.e2e_us is not None]

    breakdown = {}
    for stage, picker in (
        ("fastest", lambda o: o.decided_by is DecidedBy.FASTEST),
        ("fast", lambda o: o.decided_by is DecidedBy.FAST),
        ("slow", lambda o: o.decided_by is DecidedBy.SLOW),
        ("slow_timeout_fallback", lambda o: o.decided_by is DecidedBy.SLOW_TIMEOUT_FALLBACK),
    ):
        group = [o for o in result.outcomes if picker(o)]
        if not group:
            continue
        breakdown[stage] = {
            "collection_us": _median(o.collection_us for o in group),
            "queueing_us": _median(o.queue_us for o in group),
            "slow_queueing_us": _median(o.slow_queue_us for o in group),
            "featurization_us": _median(o.featurize_us for o in group),
            "inference_us": _median(
                sum(v for v in (o.infer_fastest_us, o.infer_fast_us, o.infer_slow_us) if v is not None)
                if any(v is not None for v in (o.infer_fastest_us, o.infer_fast_us, o.infer_slow_us)) else None
                for o in group),
            "count": len(group),
        }

    f1 = None
    labeled = 0
    if trace is not None:
        pairs = [(trace.labels[o.key], o.label) for o in decided
                 if o.label is not None and o.key in trace.labels]
        labeled = len(pairs)
        if pairs:
            truth, pred = zip(*pairs)
            f1 = weighted_f1(truth, pred, trace.n_classes)

    return RunReport(
        service_rate=len(decided) / result.duration_s if result.duration_s > 0 else 0.0,
        latency_quantiles_us=_quantiles(e2e),
        stage_latency_breakdown_us=breakdown,
        miss_rate=dropped / result.admitted_flows if result.admitted_flows else 0.0,
        f1_weighted=f1,
        decided_by_histogram=histogram,
        admitted_flows=result.admitted_flows,
        labeled_flows=labeled,
        consumers=result.consumers,
        duration_s=result.duration_s,
        q1_drops=result.q1_drops,
        q3_drops=result.q3_drops,
        purged_entries=result.purged_entries,
        pacing_error_p99_us=replayer.pacing_error_p99_us if replayer else None,
        pacing_unreliable=replayer.pacing_unreliable if replayer else False,
        arrival_rate=arrival_rate if arrival_rate is not None else (replayer.realized_rate if replayer else None),
        config_hash=config_hash,
        effective_config=effective_config,
    )


# ----------------------------------------------------------------------------
# assignment curves

@dataclass
class AssignmentCurve:
    kind: str
    portions: list[float]
    realized_portions: list[float] = field(default_factory=list)
    captured_incorrect: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)


@dataclass
class SweepResult:
    curves: dict[str, AssignmentCurve]
    normalized_auc: dict[str, Optional[float]]
    f1_fastest: float

    def dump_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "portion", "realized_portion", "captured_incorrect", "f1"])
            for curve in self.curves.values():
                for i, p in enumerate(curve.portions):
                    writer.writerow([curve.kind, p, curve.realized_portions[i],
                                     curve.captured_incorrect[i], curve.f1[i]])


def sweep_assignment(points: Sequence[CalibrationPoint],
                     kinds: Sequence[str] = ("oracle", "universal", "per_class", "random"),
                     portions: Optional[Sequence[float]] = None, seed: int = 0,
                     n_classes: Optional[int] = None) -> SweepResult:
    """Captured-incorrect and F1 curves per policy, plus the normalized AUC table.

    Normalized AUC is the trapezoid area of (F1 - F1_at_portion_0) over the
    portion axis, divided by the Oracle policy's area; None when the fastest
    stage is already perfect (Oracle area zero).
    """
    if portions is None:
        portions = sweep_portions()
    portions = list(portions)
    incorrect = np.array([not p.correct for p in points], dtype=bool)
    n_incorrect = int(incorrect.sum())
    f1_fastest = simulated_f1(points, np.zeros(len(points), dtype=bool), n_classes)

    oracle = oracle_policy(points)
    curves: dict[str, AssignmentCurve] = {}
    for kind in kinds:
        curve = AssignmentCurve(kind=kind, portions=portions)
        for p in portions:
            if kind == "oracle":
                mask = oracle.escalate_mask(points, portion=p)
            else:
                mask = build_policy(points, kind, p, seed=seed).escalate_mask(points)
            curve.realized_portions.append(float(mask.mean()) if len(mask) else 0.0)
            curve.captured_incorrect.append(
                float((mask & incorrect).sum() / n_incorrect) if n_incorrect else float("nan"))
            curve.f1.append(simulated_f1(points, mask, n_classes))
        curves[kind] = curve

    areas = {
        kind: float(np.trapezoid(np.asarray(c.f1) - f1_fastest, np.asarray(c.portions)))
        for kind, c in curves.items()
    }
    oracle_area = areas.get("oracle")
    normalized = {}
    for kind, area in areas.items():
        if oracle_area is None or oracle_area == 0.0:
            normalized[kind] = None
        else:
            normalized[kind] = area / oracle_area
    return SweepResult(curves=curves, normalized_auc=normalized, f1_fastest=f1_fastest)


def build_stage_calibration(upstream_model, downstream_model, X_up: np.ndarray,
                            X_down: np.ndarray, y: np.ndarray, metric: str = "lc") -> list[CalibrationPoint]:
    """Calibration triples (upstream uncertainty+label, downstream label, truth)."""
    from .models import uncertainty_scores

    up_proba = upstream_model.proba_matrix(X_up)
    unc = uncertainty_scores(up_proba, metric)
    up_labels = np.argmax(up_proba, axis=1)
    down_labels = downstream_model.predict_batch(X_down)
    return [
        CalibrationPoint(float(u), int(f), int(s), int(t))
        for u, f, s, t in zip(unc, up_labels, down_labels, y)
    ]
