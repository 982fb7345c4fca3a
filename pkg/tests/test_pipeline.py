import struct
import time
from collections import Counter

import numpy as np
import pytest

from flowcascade.assignment import PolicyKind, ThresholdPolicy
from flowcascade.flow_state import FlowStateConfig
from flowcascade.models.base import ClassifierModel
from flowcascade.packet_codec import LinkType, TimedPacket, decode_packet, parse_packet
from flowcascade.pipeline import CascadeSpec, DecidedBy, StageSpec, serve

ETH = bytes.fromhex("aabbccddeeff") + bytes.fromhex("112233445566") + b"\x08\x00"
N_CLASSES = 4


def tcp_frame(src, sport, dport, seq=1):
    ip = struct.pack(">BBHHHBBHII", 0x45, 0, 40, 1, 0x4000, 64, 6, 0, src, 0x0A0000FE)
    tcp = struct.pack(">HHIIBBHHH", sport, dport, seq, 0, 5 << 4, 0x10, 8192, 0, 0)
    return ETH + ip + tcp


def _port_of(x: np.ndarray) -> int:
    bits = x[496:512]
    return int("".join(str(int(b)) for b in bits), 2)


class StageStub(ClassifierModel):
    """Reads dst_port from the vector: port = label*1000 + t1*100 + t2*10.

    The stage's digit selects confident (0.9 top prob) vs uncertain (0.4).
    Digit 9 in t1 raises, for the error-outcome path.
    """

    family = "decision_tree"

    def __init__(self, digit: int, packet_depth: int = 1):
        super().__init__(N_CLASSES, packet_depth, 1024 * packet_depth)
        self.digit = digit

    def _proba_row(self, x):
        port = _port_of(x)
        label = port // 1000
        tier = (port // (100 if self.digit == 1 else 10)) % 10
        if tier == 9:
            raise RuntimeError("stub model refuses this flow")
        top = 0.9 if tier == 0 else 0.4
        p = np.full(N_CLASSES, (1 - top) / (N_CLASSES - 1))
        p[label] = top
        return p

    def proba_matrix(self, X):
        return np.stack([self._proba_row(row) for row in X])


FASTEST_STUB = StageStub(digit=1)
FAST_STUB = StageStub(digit=2)
SLOW_STUB = StageStub(digit=1, packet_depth=3)


def policy(threshold):
    return ThresholdPolicy(PolicyKind.UNIVERSAL, portion=0.0, universal_threshold=threshold)


def stub_spec():
    return CascadeSpec(
        fastest=StageSpec(FASTEST_STUB, policy(0.5)),
        fast=StageSpec(FAST_STUB, policy(0.5)),
        slow=StageSpec(SLOW_STUB),
    )


def timed(raw, ts_us):
    key = parse_packet(raw, LinkType.ETHERNET)[0]
    return TimedPacket(key, raw, LinkType.ETHERNET, ts_us, ts_us)


MS = 1000


class TestScriptedCascade:
    def test_five_flow_decided_by(self):
        # hand simulation with thresholds 0.5/0.5 (lc: confident 0.1, uncertain 0.6):
        #   flow 1 port 1000: confident at fastest            -> fastest, label 1
        #   flow 2 port 2100: uncertain, confident at fast    -> fast, label 2
        #   flow 3 port 3110: uncertain twice, 3 packets      -> slow, label 3
        #   flow 4 port 1110: uncertain twice, 2 packets ever -> fallback, label 1
        #   flow 5 port 0:    confident at fastest            -> fastest, label 0
        packets = []
        for i, (sport, dport, count) in enumerate([
            (20001, 1000, 1), (20002, 2100, 1), (20003, 3110, 3), (20004, 1110, 2), (20005, 0, 1),
        ]):
            for k in range(count):
                packets.append(timed(tcp_frame(0x0A000001 + i, sport, dport), (i * 5 + k * 20) * MS))
        packets.sort(key=lambda p: p.capture_time_us)
        result = serve(stub_spec(), packets, consumers=1,
                       flow_config=FlowStateConfig(ttl_ms=200, n_slow_packets=3))
        by_port = {o.key.dst_port: o for o in result.outcomes}
        assert by_port[1000].decided_by is DecidedBy.FASTEST and by_port[1000].label == 1
        assert by_port[2100].decided_by is DecidedBy.FAST and by_port[2100].label == 2
        assert by_port[3110].decided_by is DecidedBy.SLOW and by_port[3110].label == 3
        assert by_port[1110].decided_by is DecidedBy.SLOW_TIMEOUT_FALLBACK and by_port[1110].label == 1
        assert by_port[0].decided_by is DecidedBy.FASTEST and by_port[0].label == 0
        assert result.admitted_flows == 5 == len(result.outcomes)

    def test_model_error_becomes_dropped_with_diagnostic(self):
        packets = [timed(tcp_frame(0x0A000009, 20009, 1900), 0)]
        result = serve(stub_spec(), packets, consumers=1,
                       flow_config=FlowStateConfig(ttl_ms=200, n_slow_packets=3))
        (outcome,) = result.outcomes
        assert outcome.decided_by is DecidedBy.DROPPED
        assert "stub model refuses" in outcome.diagnostic

    def test_stalled_consumer_does_not_block_progress(self):
        packets = [timed(tcp_frame(0x0A000100 + i, 20000 + i, 1000), i * MS) for i in range(20)]
        t0 = time.monotonic()
        result = serve(stub_spec(), packets, consumers=2, stall_workers={0: 60.0},
                       flow_config=FlowStateConfig(ttl_ms=200, n_slow_packets=3))
        assert time.monotonic() - t0 < 30
        assert len(result.outcomes) == 20
        assert all(o.decided_by is DecidedBy.FASTEST for o in result.outcomes)


@pytest.fixture(scope="module")
def tiny_bench(tmp_path_factory):
    from flowcascade.crafting import prune_features
    from flowcascade.dataset import extract_flows, matrix_at_depth, split_indices
    from flowcascade.harness import make_synthetic_benchmark
    from flowcascade.models import BoostedTreesConfig, train_boosted_trees, train_decision_tree

    trace = make_synthetic_benchmark(tmp_path_factory.mktemp("pipe"), seed=3, n_flows=700,
                                     n_classes=4, difficulty=0.3, flow_rate=700.0)
    records = extract_flows(trace, 3)
    y = records.labels
    train_i, _, _ = split_indices(len(records.keys), seed=0)
    X1 = matrix_at_depth(records, 1)
    X3 = matrix_at_depth(records, 3)
    mask1 = prune_features(X1[train_i])
    mask3 = prune_features(X3[train_i])
    dt = train_decision_tree(X1[train_i], y[train_i], 15, n_classes=4,
                             feature_mask=mask1.kept_columns)
    gbt = train_boosted_trees(X3[train_i], y[train_i],
                              BoostedTreesConfig(n_rounds=15, learning_rate=0.25, num_leaves=15, seed=2),
                              n_classes=4, packet_depth=3, feature_mask=mask3.kept_columns)
    return trace, records, dt, gbt, X1


class TestRealModels:
    def test_no_escalation_matches_batch_labels_exactly(self, tiny_bench):
        trace, records, dt, gbt, X1 = tiny_bench
        from flowcascade.harness import Replayer
        import math

        spec = CascadeSpec(fastest=StageSpec(dt, policy(None)))
        replayer = Replayer(trace.capture, speed=math.inf)
        result = serve(spec, replayer.packets(), consumers=2,
                       flow_config=FlowStateConfig(n_slow_packets=3), backpressure="block")
        assert all(o.decided_by is DecidedBy.FASTEST for o in result.outcomes)
        batch = dict(zip(records.keys, dt.predict_batch(X1)))
        assert len(result.outcomes) == len(records.keys)
        for o in result.outcomes:
            assert o.label == batch[o.key]

    def test_escalate_all_reaches_slow_and_waits_for_packets(self, tiny_bench):
        trace, records, dt, gbt, _ = tiny_bench
        from flowcascade.harness import Replayer

        spec = CascadeSpec(fastest=StageSpec(dt, policy(-1.0)), slow=StageSpec(gbt))
        replayer = Replayer(trace.capture, speed=4.0)
        result = serve(spec, replayer.packets(), consumers=2,
                       flow_config=FlowStateConfig(ttl_ms=4000, n_slow_packets=3))
        hist = result.histogram()
        assert hist[DecidedBy.FASTEST] == 0 and hist[DecidedBy.FAST] == 0
        assert hist[DecidedBy.SLOW] > 0
        # slow-decided flows cannot answer before their packets arrive
        waits = {k: (ts[2] - ts[0]) / 4.0 for k, ts in zip(records.keys, records.times_us)
                 if len(ts) >= 3}
        slow = [o for o in result.outcomes if o.decided_by is DecidedBy.SLOW]
        med_e2e = np.median([o.e2e_us for o in slow])
        med_wait = np.median([waits[o.key] for o in slow])
        assert med_e2e >= med_wait * 0.9

    def test_outcome_labels_independent_of_consumer_count(self, tiny_bench):
        trace, records, dt, gbt, _ = tiny_bench
        from flowcascade.harness import Replayer
        import math

        spec = CascadeSpec(fastest=StageSpec(dt, policy(0.3)), slow=StageSpec(gbt))
        results = []
        for consumers in (1, 2):
            replayer = Replayer(trace.capture, speed=math.inf)
            result = serve(spec, replayer.packets(), consumers=consumers,
                           flow_config=FlowStateConfig(ttl_ms=10000, n_slow_packets=3),
                           backpressure="block")
            results.append(Counter((str(o.key), o.label, o.decided_by) for o in result.outcomes))
        assert results[0] == results[1]

    def test_overload_drops_are_counted_never_silent(self, tiny_bench):
        trace, records, dt, gbt, _ = tiny_bench
        from flowcascade.harness import Replayer
        import math

        spec = CascadeSpec(fastest=StageSpec(dt, policy(None)))
        replayer = Replayer(trace.capture, speed=math.inf)
        result = serve(spec, replayer.packets(), consumers=1,
                       flow_config=FlowStateConfig(ttl_ms=10000, n_slow_packets=3, q1_capacity=16),
                       backpressure="drop", max_batch=8, stall_workers={0: 1.0})
        hist = result.histogram()
        assert hist[DecidedBy.DROPPED] == result.q1_drops > 0
        assert sum(hist.values()) == result.admitted_flows == len(records.keys)


class TestSpecValidation:
    def test_mismatched_classes_rejected(self):
        spec = CascadeSpec(fastest=StageSpec(StageStub(1), policy(0.5)),
                           fast=StageSpec(StageStub(2)))
        spec.fast.model.n_classes = 7
        with pytest.raises(ValueError, match="n_classes"):
            spec.validate()

    def test_escalating_stage_needs_policy(self):
        spec = CascadeSpec(fastest=StageSpec(StageStub(1)), slow=StageSpec(SLOW_STUB))
        with pytest.raises(ValueError, match="policy"):
            spec.validate()

    def test_evaluation_only_policy_rejected(self):
        oracle = ThresholdPolicy(PolicyKind.ORACLE, portion=0.2)
        spec = CascadeSpec(fastest=StageSpec(StageStub(1), oracle), slow=StageSpec(SLOW_STUB))
        with pytest.raises(ValueError, match="evaluation-only"):
            spec.validate()

    def test_slow_depth_must_match_config(self, tiny_bench):
        _, _, dt, gbt, _ = tiny_bench
        spec = CascadeSpec(fastest=StageSpec(dt, policy(0.5)), slow=StageSpec(gbt))
        with pytest.raises(ValueError, match="n_slow_packets"):
            serve(spec, [], consumers=1, flow_config=FlowStateConfig(n_slow_packets=10))
