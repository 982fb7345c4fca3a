"""The serving engine: fastest -> fast -> slow cascade over a packet stream.

One ingest thread admits packets and dispatches work; N identical consumer
processes featurize and run whichever stage a work item needs; a collector
thread turns results into outcomes and escalations.  Stage 2 reuses stage 1's
first-packet features; only the slow stage consumes accumulated packets.

Outcome labels depend only on the trace and the models (escalation fate is
judged on capture timestamps, see flow_state), so they are reproducible across
consumer counts; wall-clock timestamps are not.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .assignment import ThresholdPolicy, load_policy
from .flow_state import EscalationRequest, FlowStateConfig, QueueSet, WorkItem
from .models import load_model
from .packet_codec import LinkType, TimedPacket, decode_packet


def _now_us() -> float:
    return time.perf_counter() * 1e6


class DecidedBy(Enum):
    FASTEST = "fastest"
    FAST = "fast"
    SLOW = "slow"
    SLOW_TIMEOUT_FALLBACK = "slow_timeout_fallback"
    DROPPED = "dropped"


@dataclass
class StageSpec:
    model: object
    policy: Optional[ThresholdPolicy] = None  # None on a terminal stage
    metric: str = "lc"


@dataclass
class CascadeSpec:
    fastest: StageSpec
    fast: Optional[StageSpec] = None
    slow: Optional[StageSpec] = None

    def validate(self) -> None:
        stages = [("fastest", self.fastest)] + [(n, s) for n, s in (("fast", self.fast), ("slow", self.slow)) if s]
        n_classes = {s.model.n_classes for _, s in stages}
        if len(n_classes) != 1:
            raise ValueError(f"stages disagree on n_classes: {n_classes}")
        for name, stage in stages:
            escalates = (name == "fastest" and (self.fast or self.slow)) or (name == "fast" and self.slow)
            if escalates:
                if stage.policy is None:
                    raise ValueError(f"{name} stage needs an escalation policy")
                if stage.policy.evaluation_only:
                    raise ValueError(f"{name} stage policy kind {stage.policy.kind.value} is evaluation-only")

    @property
    def n_classes(self) -> int:
        return self.fastest.model.n_classes


@dataclass(slots=True)
class FlowOutcome:
    key: object
    label: Optional[int]
    decided_by: DecidedBy
    t_first_packet_us: float
    t_decision_us: Optional[float]
    queue_us: Optional[float] = None
    featurize_us: Optional[float] = None
    infer_fastest_us: Optional[float] = None
    infer_fast_us: Optional[float] = None
    infer_slow_us: Optional[float] = None
    collection_us: Optional[float] = None
    slow_queue_us: Optional[float] = None
    diagnostic: Optional[str] = None

    @property
    def e2e_us(self) -> Optional[float]:
        if self.t_decision_us is None:
            return None
        return self.t_decision_us - self.t_first_packet_us


@dataclass
class ServeResult:
    outcomes: list[FlowOutcome]
    admitted_flows: int
    duration_s: float
    consumers: int
    q1_drops: int
    q3_drops: int
    purged_entries: int

    def histogram(self) -> dict[DecidedBy, int]:
        counts = {kind: 0 for kind in DecidedBy}
        for o in self.outcomes:
            counts[o.decided_by] += 1
        return counts

    @property
    def decided(self) -> list[FlowOutcome]:
        return [o for o in self.outcomes if o.decided_by is not DecidedBy.DROPPED]


# ----------------------------------------------------------------------------
# consumer side

def _run_entry(spec: CascadeSpec, vec, timings) -> tuple[str, int, Optional[int]]:
    """Run the depth-1 stages on one vector.

    Returns (kind, label, fallback_label): kind is "fastest"/"fast" for a
    terminal decision, or "escalate" with the label the slow stage falls back to.
    """
    t0 = _now_us()
    p1 = spec.fastest.model.predict_proba(vec)
    timings["infer_fastest_us"] = _now_us() - t0
    downstream = spec.fast or spec.slow
    if not downstream or not spec.fastest.policy.escalate(p1.uncertainty(spec.fastest.metric), p1.label):
        return "fastest", p1.label, None
    if spec.fast is None:
        return "escalate", p1.label, p1.label
    t0 = _now_us()
    p2 = spec.fast.model.predict_proba(vec)
    timings["infer_fast_us"] = _now_us() - t0
    if spec.slow and spec.fast.policy.escalate(p2.uncertainty(spec.fast.metric), p2.label):
        return "escalate", p2.label, p2.label
    return "fast", p2.label, None


def _worker_main(worker_id: int, spec: CascadeSpec, task_q, result_q, stall_s: float):
    if stall_s:
        time.sleep(stall_s)
    while True:
        msg = task_q.get()
        if msg is None:
            return
        kind, items = msg
        replies = []
        for item in items:
            try:
                if kind == "entry":
                    wid, raw, link, enq_us = item
                    timings = {"queue_us": _now_us() - enq_us}
                    t0 = _now_us()
                    decoded = decode_packet(raw, LinkType(link))
                    timings["featurize_us"] = _now_us() - t0
                    outcome_kind, label, fallback = _run_entry(spec, decoded[1], timings)
                    timings["decided_us"] = _now_us()
                    if outcome_kind == "escalate":
                        replies.append(("escalate", wid, fallback, timings))
                    else:
                        replies.append(("decided", wid, outcome_kind, label, timings))
                else:  # slow
                    wid, raws, link, enq_us = item
                    timings = {"slow_queue_us": _now_us() - enq_us}
                    t0 = _now_us()
                    parts = [decode_packet(raw, LinkType(link))[1] for raw in raws]
                    features = np.concatenate(parts)
                    timings["featurize_us"] = _now_us() - t0
                    t0 = _now_us()
                    p = spec.slow.model.predict_proba(features)
                    timings["infer_slow_us"] = _now_us() - t0
                    timings["decided_us"] = _now_us()
                    replies.append(("decided", wid, "slow", p.label, timings))
            except Exception as exc:  # noqa: BLE001 - a bad flow must not kill the consumer
                replies.append(("error", item[0], f"{type(exc).__name__}: {exc}"))
        result_q.put(replies)


class ConsumerPool:
    """N identical inference workers pulling work from a shared task queue."""

    def __init__(self, spec: CascadeSpec, n: int, *, stall_workers: Optional[dict[int, float]] = None):
        if n < 1:
            raise ValueError("consumers must be >= 1")
        ctx = mp.get_context("fork")
        self.n = n
        self.task_q = ctx.Queue()
        self.result_q = ctx.Queue()
        stalls = stall_workers or {}
        self.procs = [
            ctx.Process(target=_worker_main, name=f"consumer-{i}",
                        args=(i, spec, self.task_q, self.result_q, stalls.get(i, 0.0)),
                        daemon=True)
            for i in range(n)
        ]
        for p in self.procs:
            p.start()

    def submit(self, kind: str, items: list) -> None:
        self.task_q.put((kind, items))

    def stop(self, timeout: float = 10.0) -> None:
        for _ in self.procs:
            self.task_q.put(None)
        deadline = time.monotonic() + timeout
        for p in self.procs:
            p.join(max(0.0, deadline - time.monotonic()))
        for p in self.procs:
            if p.is_alive():
                p.terminate()
                p.join(1.0)
        self.task_q.cancel_join_thread()


def spawn_consumers(spec: CascadeSpec, n: int, *, stall_workers=None) -> ConsumerPool:
    return ConsumerPool(spec, n, stall_workers=stall_workers)


# ----------------------------------------------------------------------------
# coordinator side

@dataclass(slots=True)
class _Pending:
    key: object
    t_first_ingest_us: float
    collection_us: Optional[float] = None
    carried: Optional[dict] = None


class _Coordinator:
    """Bookkeeping between the queues and the pool; callers hold qs.lock."""

    def __init__(self, qs: QueueSet, pool: ConsumerPool, link_value: int, window: int, max_batch: int):
        self.qs = qs
        self.pool = pool
        self.link_value = link_value
        self.window = window
        self.max_batch = max_batch
        self.next_wid = 0
        self.pending: dict[int, _Pending] = {}
        self.in_flight = 0
        self.outcomes: list[FlowOutcome] = []

    def handle_events(self) -> None:
        for event in self.qs.drain_events():
            kind, payload = event
            if kind == "dropped":
                item: WorkItem = payload
                self.outcomes.append(FlowOutcome(item.key, None, DecidedBy.DROPPED,
                                                 item.ingest_time_us, None, diagnostic="q1 overflow"))
            elif kind == "dropped_escalation":
                req: EscalationRequest = payload
                self.outcomes.append(FlowOutcome(req.key, None, DecidedBy.DROPPED,
                                                 req.first_item.ingest_time_us, None,
                                                 diagnostic="q3 overflow"))
            else:  # fallback
                req = payload
                carried = req.carried or {}
                self.outcomes.append(FlowOutcome(
                    req.key, req.fallback_label, DecidedBy.SLOW_TIMEOUT_FALLBACK,
                    req.first_item.ingest_time_us, _now_us(),
                    queue_us=carried.get("queue_us"), featurize_us=carried.get("featurize_us"),
                    infer_fastest_us=carried.get("infer_fastest_us"),
                    infer_fast_us=carried.get("infer_fast_us"),
                ))

    def dispatch(self) -> None:
        """Move ready q3/q1 work to the consumer pool, bounded by the window."""
        while self.in_flight < self.window:
            ready = self.qs.pop_escalations(self.max_batch)
            if not ready:
                break
            items = []
            enq = _now_us()
            for req, buf in ready:
                wid = self.next_wid
                self.next_wid += 1
                self.pending[wid] = _Pending(
                    key=req.key,
                    t_first_ingest_us=req.first_item.ingest_time_us,
                    collection_us=(buf.completed_ingest_us - buf.first_ingest_us
                                   if buf.completed_ingest_us is not None else None),
                    carried=req.carried or {},
                )
                items.append((wid, [pkt.raw for pkt in buf.entries], self.link_value, enq))
                self.in_flight += 1
            self.pool.submit("slow", items)
        while self.in_flight < self.window:
            work = self.qs.pop_work(min(self.max_batch, self.window - self.in_flight))
            if not work:
                break
            items = []
            enq = _now_us()
            for w in work:
                wid = self.next_wid
                self.next_wid += 1
                self.pending[wid] = _Pending(key=w.key, t_first_ingest_us=w.ingest_time_us)
                items.append((wid, w.payload.raw, self.link_value, enq))
                self.in_flight += 1
            self.pool.submit("entry", items)

    def handle_result(self, reply) -> None:
        kind = reply[0]
        pend = self.pending.pop(reply[1])
        self.in_flight -= 1
        if kind == "error":
            if self.qs.finalize(pend.key):
                self.outcomes.append(FlowOutcome(pend.key, None, DecidedBy.DROPPED,
                                                 pend.t_first_ingest_us, None, diagnostic=reply[2]))
            return
        if kind == "decided":
            _, _, stage, label, timings = reply
            if not self.qs.finalize(pend.key):
                return  # a drop or eviction already decided this flow
            carried = pend.carried or {}
            featurize = timings.get("featurize_us", 0.0) + carried.get("featurize_us", 0.0)
            self.outcomes.append(FlowOutcome(
                pend.key, label, DecidedBy(stage),
                pend.t_first_ingest_us, timings["decided_us"],
                queue_us=timings.get("queue_us", carried.get("queue_us")),
                featurize_us=featurize if featurize else None,
                infer_fastest_us=timings.get("infer_fastest_us", carried.get("infer_fastest_us")),
                infer_fast_us=timings.get("infer_fast_us", carried.get("infer_fast_us")),
                infer_slow_us=timings.get("infer_slow_us"),
                collection_us=pend.collection_us,
                slow_queue_us=timings.get("slow_queue_us"),
            ))
            return
        # escalate: hand the flow to the slow stage (q3 / waiting / ttl fallback)
        _, _, fallback_label, timings = reply
        first_item = WorkItem(pend.key, None, 0, pend.t_first_ingest_us)
        self.qs.register_escalation(EscalationRequest(pend.key, fallback_label, first_item, carried=timings))


def serve(spec: CascadeSpec, packets: Iterable[TimedPacket], consumers: int = 1,
          flow_config: Optional[FlowStateConfig] = None, *, backpressure: str = "drop",
          max_batch: int = 64, stall_workers=None, link_type: LinkType = LinkType.ETHERNET,
          drain_timeout_s: float = 300.0) -> ServeResult:
    """Run the cascade over a packet stream; every admitted flow yields one outcome.

    backpressure "drop" keeps ingest non-blocking (overload shows up as counted
    q1 drops, replay pacing stays honest); "block" applies backpressure instead,
    for offline max-throughput runs where pacing does not matter.
    """
    spec.validate()
    if backpressure not in ("drop", "block"):
        raise ValueError("backpressure must be 'drop' or 'block'")
    cfg = flow_config or FlowStateConfig()
    cfg.validate()
    if spec.slow is not None and spec.slow.model.packet_depth != cfg.n_slow_packets:
        raise ValueError(
            f"slow model depth {spec.slow.model.packet_depth} != n_slow_packets {cfg.n_slow_packets}")
    qs = QueueSet(cfg)
    pool = ConsumerPool(spec, consumers, stall_workers=stall_workers)
    window = max(consumers * max_batch * 2, 128)
    coord = _Coordinator(qs, pool, link_type.value, window, max_batch)
    collector_error: list[BaseException] = []

    def collect():
        try:
            while True:
                msg = pool.result_q.get()
                if msg is None:
                    return
                with qs.lock:
                    for reply in msg:
                        coord.handle_result(reply)
                    coord.handle_events()
                    coord.dispatch()
        except BaseException as exc:  # pragma: no cover - re-raised on the main thread
            collector_error.append(exc)

    collector = threading.Thread(target=collect, name="collector", daemon=True)
    collector.start()
    t_start = time.perf_counter()
    try:
        for pkt in packets:
            if backpressure == "block":
                while True:
                    with qs.lock:
                        room = len(qs.q1) < cfg.q1_capacity
                    if room:
                        break
                    time.sleep(0.0002)
            qs.admit_packet(pkt)
            with qs.lock:
                coord.handle_events()
                coord.dispatch()
            if collector_error:
                raise collector_error[0]
        qs.end_of_stream()
        deadline = time.monotonic() + drain_timeout_s
        while True:
            with qs.lock:
                coord.handle_events()
                coord.dispatch()
                done = coord.in_flight == 0 and not qs.q1 and not qs.q3 and not qs.waiting and not qs.events
            if done:
                break
            if collector_error:
                raise collector_error[0]
            if time.monotonic() > deadline:
                raise RuntimeError(f"pipeline drain stalled with {coord.in_flight} items in flight")
            time.sleep(0.0005)
        duration = time.perf_counter() - t_start
    finally:
        pool.stop()
        pool.result_q.put(None)
        collector.join(timeout=10.0)

    with qs.lock:
        coord.handle_events()
    if collector_error:
        raise collector_error[0]
    return ServeResult(
        outcomes=coord.outcomes,
        admitted_flows=qs.admitted_flows,
        duration_s=duration,
        consumers=consumers,
        q1_drops=qs.q1_drops,
        q3_drops=qs.q3_drops,
        purged_entries=qs.purged_total,
    )


# ----------------------------------------------------------------------------
# cascade spec files

def save_cascade(path, spec_doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(spec_doc, fh, indent=2)


def load_cascade(path) -> tuple[CascadeSpec, int]:
    """Load a cascade spec JSON: stage model paths plus inline or referenced policies."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)

    def stage(entry) -> Optional[StageSpec]:
        if entry is None:
            return None
        model_path = Path(entry["model"])
        if not model_path.is_absolute():
            model_path = path.parent / model_path
        model = load_model(model_path)
        policy = None
        if entry.get("policy") is not None:
            pol = entry["policy"]
            if isinstance(pol, dict):
                policy = ThresholdPolicy.from_json(pol)
            else:
                pol_path = Path(pol)
                policy = load_policy(pol_path if pol_path.is_absolute() else path.parent / pol_path)
        return StageSpec(model=model, policy=policy, metric=entry.get("metric", "lc"))

    spec = CascadeSpec(fastest=stage(doc["fastest"]), fast=stage(doc.get("fast")), slow=stage(doc.get("slow")))
    n_slow = int(doc.get("n_slow_packets", spec.slow.model.packet_depth if spec.slow else 1))
    return spec, n_slow


def write_outcomes_csv(path, outcomes: Iterable[FlowOutcome]) -> None:
    import csv

    fields = ["key", "label", "decided_by", "t_first_packet_us", "t_decision_us", "queue_us",
              "featurize_us", "infer_fastest_us", "infer_fast_us", "infer_slow_us",
              "collection_us", "slow_queue_us", "diagnostic"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for o in outcomes:
            writer.writerow([
                str(o.key), "" if o.label is None else o.label, o.decided_by.value,
                f"{o.t_first_packet_us:.1f}",
                "" if o.t_decision_us is None else f"{o.t_decision_us:.1f}",
                *("" if v is None else f"{v:.1f}" for v in (
                    o.queue_us, o.featurize_us, o.infer_fastest_us, o.infer_fast_us,
                    o.infer_slow_us, o.collection_us, o.slow_queue_us)),
                o.diagnostic or "",
            ])
