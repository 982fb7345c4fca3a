"""Per-flow packet accumulation and the three-queue escalation state machine.

Queue 1 holds first-packet work items, queue 2 is a keyed store of per-flow
buffers awaiting a slow-stage request, queue 3 holds ready escalation requests.
All mutations happen under one lock (per-flow linearizability); nothing here
blocks on model inference.

Expiry is judged against the trace (capture) clock, advanced as a watermark by
the ingest thread: a flow's slow stage runs iff the trace itself delivers
n_slow_packets within ttl of the flow's first packet.  This keeps outcome
labels independent of consumer count and wall-clock scheduling.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

_FOREVER_US = float("inf")


class AdmitResult(Enum):
    ENQUEUED_FIRST = "enqueued_first"
    ACCUMULATED = "accumulated"
    IGNORED_POST_DECISION = "ignored_post_decision"


class NotReady:
    """Sentinel: escalation cannot be matched yet."""

    def __repr__(self) -> str:
        return "NOT_READY"


NOT_READY = NotReady()


@dataclass
class FlowStateConfig:
    ttl_ms: int = 10_000
    q1_capacity: int = 4096
    q3_capacity: int = 4096
    q2_capacity: int = 262_144
    n_slow_packets: int = 10

    def validate(self) -> None:
        for name in ("ttl_ms", "q1_capacity", "q3_capacity", "q2_capacity", "n_slow_packets"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def ttl_us(self) -> int:
        return self.ttl_ms * 1000


@dataclass(slots=True)
class FlowBuffer:
    """Ordered per-packet payloads of one live flow, capped at n_slow_packets."""

    key: Any
    entries: list
    first_seen_us: int
    first_ingest_us: int
    packet_count_total: int = 1
    completed_ingest_us: Optional[int] = None  # ingest wall time of the capping packet
    expired: bool = False


@dataclass(slots=True)
class WorkItem:
    """First-packet work for the entry stages."""

    key: Any
    payload: Any
    capture_time_us: int
    ingest_time_us: int


@dataclass(slots=True)
class EscalationRequest:
    """A fast-stage handoff to the slow model: key, first-packet context, fallback."""

    key: Any
    fallback_label: int
    first_item: WorkItem
    carried: Any = None  # opaque timing/bookkeeping from the earlier stages


class QueueSet:
    """Shared flow state: one ingest writer, purge sweeps, many consumers."""

    def __init__(self, config: FlowStateConfig | None = None, auto_sweep: bool = True):
        self.config = config or FlowStateConfig()
        self.config.validate()
        self.auto_sweep = auto_sweep  # sweep every ttl/10 of watermark advance
        self.lock = threading.RLock()  # reentrant: the pipeline nests calls under it
        self.q1: deque[WorkItem] = deque()
        self.q2: dict[Any, FlowBuffer] = {}
        self.q3: deque[EscalationRequest] = deque()
        self.waiting: dict[Any, EscalationRequest] = {}
        self.decided: set = set()
        self.watermark_us: float = 0
        self._last_sweep_us: float = 0
        self.eos = False
        # events the pipeline must turn into outcomes: ("dropped", WorkItem) |
        # ("dropped_escalation", EscalationRequest) | ("fallback", EscalationRequest)
        self.events: deque = deque()
        self.admitted_flows = 0
        self.q1_drops = 0
        self.q3_drops = 0
        self.purged_total = 0

    # -- ingest side -------------------------------------------------------

    def admit_packet(self, pkt) -> AdmitResult:
        """Route one decoded packet; pkt needs key/capture_time_us/ingest_time_us."""
        cfg = self.config
        with self.lock:
            now = pkt.capture_time_us
            if now > self.watermark_us:
                self.watermark_us = now
                if self.auto_sweep and now - self._last_sweep_us >= cfg.ttl_us / 10:
                    self._purge(now)
            key = pkt.key
            if key in self.decided:
                return AdmitResult.IGNORED_POST_DECISION
            buf = self.q2.get(key)
            if buf is None:
                self.admitted_flows += 1
                buf = FlowBuffer(key=key, entries=[pkt], first_seen_us=now,
                                 first_ingest_us=pkt.ingest_time_us)
                if cfg.n_slow_packets == 1:
                    buf.completed_ingest_us = pkt.ingest_time_us
                self.q2[key] = buf
                if len(self.q2) > cfg.q2_capacity:
                    self._evict_oldest_buffer()
                item = WorkItem(key, pkt, now, pkt.ingest_time_us)
                self.q1.append(item)
                if len(self.q1) > cfg.q1_capacity:
                    oldest = self.q1.popleft()
                    self.q1_drops += 1
                    self._mark_decided(oldest.key)
                    self.q2.pop(oldest.key, None)
                    self.events.append(("dropped", oldest))
                return AdmitResult.ENQUEUED_FIRST
            if buf.expired or now - buf.first_seen_us > cfg.ttl_us:
                return AdmitResult.IGNORED_POST_DECISION
            buf.packet_count_total += 1
            if len(buf.entries) < cfg.n_slow_packets:
                buf.entries.append(pkt)
                if len(buf.entries) == cfg.n_slow_packets:
                    buf.completed_ingest_us = pkt.ingest_time_us
                    req = self.waiting.pop(key, None)
                    if req is not None:
                        self._push_ready(req)
            return AdmitResult.ACCUMULATED

    def _evict_oldest_buffer(self) -> None:
        # q2 is insertion-ordered, i.e. ordered by first_seen: the first key is oldest
        oldest_key = next(iter(self.q2))
        self.q2.pop(oldest_key)
        req = self.waiting.pop(oldest_key, None)
        if req is not None:
            self._mark_decided(oldest_key)
            self.events.append(("fallback", req))

    def _push_ready(self, req: EscalationRequest) -> None:
        self.q3.append(req)
        if len(self.q3) > self.config.q3_capacity:
            dropped = self.q3.popleft()
            self.q3_drops += 1
            self._mark_decided(dropped.key)
            self.q2.pop(dropped.key, None)
            self.events.append(("dropped_escalation", dropped))

    # -- consumer side -----------------------------------------------------

    def pop_work(self, max_items: int) -> list[WorkItem]:
        with self.lock:
            out = []
            while self.q1 and len(out) < max_items:
                out.append(self.q1.popleft())
            return out

    def pop_escalations(self, max_items: int) -> list[tuple[EscalationRequest, FlowBuffer]]:
        with self.lock:
            out = []
            while self.q3 and len(out) < max_items:
                req = self.q3.popleft()
                buf = self.q2.get(req.key)
                if buf is None:  # evicted between ready and pickup
                    self._mark_decided(req.key)
                    self.events.append(("fallback", req))
                    continue
                out.append((req, buf))
            return out

    def match_escalation(self, key) -> FlowBuffer | NotReady:
        """The flow's buffer once it holds n_slow_packets vectors, else NOT_READY."""
        with self.lock:
            buf = self.q2.get(key)
            if buf is None or buf.expired or len(buf.entries) < self.config.n_slow_packets:
                return NOT_READY
            return buf

    def register_escalation(self, req: EscalationRequest) -> str:
        """File a fast->slow escalation; returns "ready", "waiting" or "fallback".

        Ready requests land in q3.  A request whose flow cannot complete within
        ttl (judged by the capture-clock watermark) resolves immediately to the
        fast-stage prediction and is reported through the event queue.
        """
        cfg = self.config
        with self.lock:
            key = req.key
            if key in self.decided:
                return "fallback"
            buf = self.q2.get(key)
            if buf is not None and not buf.expired and len(buf.entries) >= cfg.n_slow_packets:
                self._push_ready(req)
                return "ready"
            expired = (buf is None or buf.expired
                       or self.eos or self.watermark_us > buf.first_seen_us + cfg.ttl_us)
            if expired:
                self._mark_decided(key)
                self.q2.pop(key, None)
                self.events.append(("fallback", req))
                return "fallback"
            self.waiting[key] = req
            return "waiting"

    # -- lifecycle ---------------------------------------------------------

    def purge_expired(self, now_us: float) -> int:
        with self.lock:
            return self._purge(now_us)

    def _purge(self, now_us: float) -> int:
        cfg = self.config
        self._last_sweep_us = now_us
        purged = 0
        for key in list(self.q2):
            buf = self.q2[key]
            if now_us - buf.first_seen_us <= cfg.ttl_us:
                break  # q2 is ordered by first_seen
            if buf.expired:
                continue
            req = self.waiting.pop(key, None)
            if req is not None:
                self._mark_decided(key)
                self.q2.pop(key)
                self.events.append(("fallback", req))
            elif key in self.decided:
                self.q2.pop(key)
            elif len(buf.entries) >= cfg.n_slow_packets:
                continue  # complete in time: a pending slow stage may still claim it
            else:
                # entry-stage work still in flight; keep a tombstone so late
                # packets are ignored and a late escalation falls back
                buf.entries = []
                buf.expired = True
            purged += 1
        self.purged_total += purged
        return purged

    def end_of_stream(self) -> None:
        """No more packets will ever arrive: resolve every waiting escalation."""
        with self.lock:
            self.eos = True
            self.watermark_us = _FOREVER_US
            for key in list(self.waiting):
                req = self.waiting.pop(key)
                self._mark_decided(key)
                self.q2.pop(key, None)
                self.events.append(("fallback", req))

    def finalize(self, key) -> bool:
        """Mark a flow decided; False if something already decided it."""
        with self.lock:
            if key in self.decided:
                return False
            self._mark_decided(key)
            self.q2.pop(key, None)
            self.waiting.pop(key, None)
            return True

    def _mark_decided(self, key) -> None:
        self.decided.add(key)

    def drain_events(self) -> list:
        with self.lock:
            out = list(self.events)
            self.events.clear()
            return out

    def idle(self) -> bool:
        with self.lock:
            return not (self.q1 or self.q3 or self.waiting or self.events)
