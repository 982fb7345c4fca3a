"""Synthetic labeled benchmark traces.

Flows come in three tiers.  "easy" flows are separable from their first packet
(per-class destination ports, TCP option patterns, window values).  "tricky"
flows carry three noisy first-packet channels (each names the true class with
probability ~0.6), which rewards models that aggregate weak evidence.  "hard"
flows have an identical first-packet signature across classes and only reveal
their class through later-packet length fields, each revealing with
probability 0.35.  The hard share grows with `difficulty`, skewed across
classes so that per-class confidence structure differs.

Inter-arrival gaps are log-normal (median ~12 ms, heavy tail), so collection
time dominates inference by orders of magnitude at replay speed 1.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .dataset import LabeledTrace, save_labels
from .packet_codec import FlowKey, LinkType, write_capture

_ETH_HDR = bytes.fromhex("020000000001") + bytes.fromhex("020000000002") + b"\x08\x00"

_REVEAL_BASE = 600
_NULL_SLOT = None  # computed from n_classes


def _ipv4(tos, total_len, ident, ttl, proto, src, dst):
    return struct.pack(">BBHHHBBHII", 0x45, tos, total_len, ident, 0x4000, ttl, proto, 0, src, dst)


def _tcp(sport, dport, seq, ack, flags, window, options=b""):
    doff = 5 + len(options) // 4
    return struct.pack(">HHIIBBHHH", sport, dport, seq, ack, doff << 4, flags, window, 0, 0) + options


def _udp(sport, dport, length):
    return struct.pack(">HHHH", sport, dport, length, 0)


def _mss_option(mss):
    return struct.pack(">BBH", 2, 4, mss)


def _wscale_option(shift):
    return struct.pack(">BBB", 3, 3, shift) + b"\x01"  # NOP pad to 4 bytes


def make_synthetic_benchmark(out_dir, seed: int = 0, n_flows: int = 20000, n_classes: int = 8,
                             difficulty: float = 0.3, flow_rate: float = 400.0,
                             tcp_fraction: float = 0.8, short_fraction: float = 0.22,
                             reveal_prob: float = 0.35) -> LabeledTrace:
    """Generate bench.pcap + labels.csv + meta.json under out_dir."""
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must be in [0, 1]")
    if not 2 <= n_classes <= 16:
        raise ValueError("n_classes must be between 2 and 16")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    null_code = n_classes  # length-field slot that reveals nothing
    hard_frac = 0.8 * difficulty
    tricky_frac = min(0.5 * difficulty, 1.0 - hard_frac)

    packets: list[tuple[int, bytes]] = []
    labels: dict[FlowKey, int] = {}
    used_keys: set[FlowKey] = set()
    tier_counts = {"easy": 0, "tricky": 0, "hard": 0}

    def noisy_code(cls: int) -> int:
        if rng.random() < 0.70:
            return cls
        return int((cls + 1 + rng.integers(n_classes - 1)) % n_classes)

    start_us = 0.0
    for _ in range(n_flows):
        start_us += rng.exponential(1_000_000.0 / flow_rate)
        cls = int(rng.integers(n_classes))
        # class-skewed tier draw: higher classes are harder to read from packet 1
        skew = 0.4 + 1.2 * cls / (n_classes - 1)
        r = rng.random()
        if r < hard_frac * skew:
            tier = "hard"
        elif r < hard_frac * skew + tricky_frac:
            tier = "tricky"
        else:
            tier = "easy"
        tier_counts[tier] += 1
        is_tcp = rng.random() < tcp_fraction

        while True:
            src = (10 << 24) | int(rng.integers(1 << 21))
            sport = int(rng.integers(1024, 65536))
            dst = (192 << 24) | (168 << 16) | (1 << 8) | (10 + int(rng.integers(8)))
            if tier == "easy":
                dport = 20000 + cls
            else:
                dport = 443 if is_tcp else 4443
            key = FlowKey(src, dst, sport, dport, 6 if is_tcp else 17)
            if key not in used_keys:
                used_keys.add(key)
                break

        if tier == "hard":
            length = 10 + int(rng.integers(5))
        elif rng.random() < short_fraction:
            length = 1 + int(rng.integers(5))
        else:
            length = 10 + int(rng.integers(5))

        tos, ttl = 0, 64
        window = 8192
        ident_first = 0
        if tier == "easy":
            window = 4096 + 256 * cls
            if not is_tcp:
                tos = 16 + 8 * cls
        elif tier == "tricky":
            tos = 4 * noisy_code(cls)
            ttl = 32 + 4 * noisy_code(cls)
            if is_tcp:
                window = 8192 + noisy_code(cls)
            else:
                ident_first = noisy_code(cls)

        seq = int(rng.integers(1 << 32))
        ts = start_us
        for k in range(length):
            if k > 0:
                ts += rng.lognormal(mean=math.log(12_000.0), sigma=1.0)
            ident = ident_first if k == 0 else 0
            if k == 0:
                if is_tcp:
                    if tier == "easy":
                        options = _mss_option(1200 + 8 * cls) + _wscale_option(cls % 8)
                    else:
                        options = _mss_option(1460)
                    l4 = _tcp(sport, dport, seq, 0, 0x02, window, options)  # SYN
                else:
                    l4 = _udp(sport, dport, 8)
                total_len = 20 + len(l4)
            else:
                slot = cls if rng.random() < reveal_prob else null_code
                total_len = _REVEAL_BASE + 16 * slot
                if is_tcp:
                    seq = (seq + int(rng.integers(1, 1200))) % (1 << 32)
                    flags = 0x18 if rng.random() < 0.5 else 0x10  # PSH|ACK or ACK
                    l4 = _tcp(sport, dport, seq, int(rng.integers(1 << 32)), flags, window)
                else:
                    l4 = _udp(sport, dport, total_len - 20)
            ip = _ipv4(tos, total_len, ident, ttl, 6 if is_tcp else 17, src, dst)
            packets.append((int(ts), _ETH_HDR + ip + l4))
        labels[key] = cls

    packets.sort(key=lambda p: p[0])
    capture = out_dir / "bench.pcap"
    write_capture(capture, ((raw, ts) for ts, raw in packets), LinkType.ETHERNET)
    save_labels(out_dir / "labels.csv", labels)
    class_names = [f"class_{i}" for i in range(n_classes)]
    meta = {
        "seed": seed, "n_flows": n_flows, "n_classes": n_classes, "difficulty": difficulty,
        "flow_rate": flow_rate, "tcp_fraction": tcp_fraction, "short_fraction": short_fraction,
        "reveal_prob": reveal_prob, "tier_counts": tier_counts, "n_packets": len(packets),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return LabeledTrace(capture, labels, class_names)
