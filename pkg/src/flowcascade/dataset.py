"""Labeled traces and per-flow training matrices.

Labels ride in a sidecar CSV ("flow_key,label") so captures stay standard pcap.
Flow features at depth k are the first k packet vectors concatenated, with
missing packets right-padded as -1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .packet_codec import VECTOR_WIDTH, FlowKey, decode_packet, read_capture


@dataclass
class LabeledTrace:
    capture: Path
    labels: dict[FlowKey, int]
    class_names: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def save_labels(path, labels: dict[FlowKey, int]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flow_key", "label"])
        for key, label in labels.items():
            writer.writerow([str(key), label])


def load_labels(path) -> dict[FlowKey, int]:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0] == "flow_key":
                continue
            labels[FlowKey.parse(row[0])] = int(row[1])
    return labels


def load_trace(capture_path, labels_path, class_names=None) -> LabeledTrace:
    labels = load_labels(labels_path)
    if class_names is None:
        n = max(labels.values()) + 1 if labels else 0
        class_names = [f"class_{i}" for i in range(n)]
    return LabeledTrace(Path(capture_path), labels, list(class_names))


@dataclass
class FlowRecords:
    """Per-flow decoded vectors (up to max_depth) plus capture timestamps."""

    keys: list[FlowKey]
    vectors: list[list[np.ndarray]]
    times_us: list[list[int]]
    labels: np.ndarray  # -1 where the flow is unlabeled
    max_depth: int
    skipped_packets: int


def extract_flows(trace: LabeledTrace, max_depth: int) -> FlowRecords:
    reader = read_capture(trace.capture)
    order: dict[FlowKey, int] = {}
    vectors: list[list[np.ndarray]] = []
    times: list[list[int]] = []
    skipped = 0
    for raw, ts_us in reader:
        decoded = decode_packet(raw, reader.link_type)
        if decoded is None:
            skipped += 1
            continue
        key, cells = decoded
        slot = order.get(key)
        if slot is None:
            order[key] = len(vectors)
            vectors.append([cells])
            times.append([ts_us])
        elif len(vectors[slot]) < max_depth:
            vectors[slot].append(cells)
            times[slot].append(ts_us)
    reader.close()
    keys = list(order)
    labels = np.array([trace.labels.get(k, -1) for k in keys], dtype=np.int64)
    return FlowRecords(keys, vectors, times, labels, max_depth, skipped)


def matrix_at_depth(records: FlowRecords, depth: int) -> np.ndarray:
    if depth > records.max_depth:
        raise ValueError(f"depth {depth} exceeds extracted max_depth {records.max_depth}")
    n = len(records.keys)
    X = np.full((n, VECTOR_WIDTH * depth), -1, dtype=np.int8)
    for i, vecs in enumerate(records.vectors):
        for j, v in enumerate(vecs[:depth]):
            X[i, j * VECTOR_WIDTH : (j + 1) * VECTOR_WIDTH] = v
    return X


def collection_wait_us(records: FlowRecords, depth: int) -> np.ndarray:
    """Per-flow wait from the first packet to the min(depth, len)-th packet."""
    waits = np.zeros(len(records.keys), dtype=np.int64)
    for i, ts in enumerate(records.times_us):
        j = min(depth, len(ts)) - 1
        waits[i] = ts[j] - ts[0]
    return waits


def split_indices(n: int, seed: int, fractions=(0.5, 0.1, 0.4)):
    """Deterministic train/validation/test split over flow indices."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def read_training_csv(path):
    """Training matrix from CSV rows of label,cell_0,...,cell_{W-1}."""
    X_rows, y = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] in ("label",) or row[0].startswith("#"):
                continue
            y.append(int(row[0]))
            X_rows.append([int(v) for v in row[1:]])
    if not X_rows:
        raise ValueError(f"{path}: no training rows")
    return np.asarray(X_rows, dtype=np.int8), np.asarray(y, dtype=np.int64)
