"""Bit-level packet decoding: pcap ingest, five-tuple flow keys, and ternary
header-bit feature vectors.

Every packet maps to a fixed 1024-cell layout where each cell is a header bit
(0/1) or ABSENT (-1) when the corresponding header or field is not present:

    cells [0, 480)      IPv4: 20-byte fixed header, then up to 40 bytes of options
    cells [480, 960)    TCP:  20-byte fixed header, then up to 40 bytes of options
    cells [960, 1024)   UDP:  8-byte header

Exactly one of the TCP/UDP sections is populated per packet.  Bits are written
in network byte order, most significant bit first.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterator, Optional

import numpy as np

ABSENT = -1
VECTOR_WIDTH = 1024

IPV4_START = 0
IPV4_FIXED_BITS = 160
IPV4_END = 480
TCP_START = 480
TCP_FIXED_BITS = 160
TCP_END = 960
UDP_START = 960
UDP_END = 1024

TCP_PROTO = 6
UDP_PROTO = 17

_ETHERTYPE_IPV4 = 0x0800


class LinkType(Enum):
    """Subset of libpcap DLT codes the reader accepts."""

    ETHERNET = 1
    RAW_IPV4 = 101


def format_ipv4(addr: int) -> str:
    return f"{addr >> 24 & 0xFF}.{addr >> 16 & 0xFF}.{addr >> 8 & 0xFF}.{addr & 0xFF}"


def parse_ipv4(text: str) -> int:
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address: {text!r}")
    value = 0
    for part in parts:
        octet = int(part)
        if not 0 <= octet <= 255:
            raise ValueError(f"bad IPv4 address: {text!r}")
        value = (value << 8) | octet
    return value


@dataclass(frozen=True, slots=True)
class FlowKey:
    """Unidirectional five-tuple flow identity; the join key across all queues."""

    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    protocol: int

    def __str__(self) -> str:
        return (
            f"{format_ipv4(self.src_addr)}:{self.src_port}>"
            f"{format_ipv4(self.dst_addr)}:{self.dst_port}/{self.protocol}"
        )

    @classmethod
    def parse(cls, text: str) -> "FlowKey":
        left, _, proto = text.rpartition("/")
        src, _, dst = left.partition(">")
        src_ip, _, src_port = src.rpartition(":")
        dst_ip, _, dst_port = dst.rpartition(":")
        return cls(
            src_addr=parse_ipv4(src_ip),
            dst_addr=parse_ipv4(dst_ip),
            src_port=int(src_port),
            dst_port=int(dst_port),
            protocol=int(proto),
        )


def _ipv4_offset(raw: bytes, link_type: LinkType) -> Optional[int]:
    if link_type is LinkType.ETHERNET:
        if len(raw) < 14:
            return None
        ethertype = (raw[12] << 8) | raw[13]
        if ethertype != _ETHERTYPE_IPV4:
            # VLAN-tagged, IPv6, ARP, ... all skipped rather than errored.
            return None
        return 14
    return 0


def parse_packet(raw: bytes, link_type: LinkType):
    """Cheap header validation: the five-tuple plus header extents.

    Returns (FlowKey, ip_offset, ip_header_len, l4_header_len), or None for any
    packet the pipeline skips (non-IPv4, non-TCP/UDP, fragments, truncated or
    length-inconsistent headers).  ``decode_packet`` applies exactly the same
    checks, so a parseable key guarantees a decodable vector.
    """
    off = _ipv4_offset(raw, link_type)
    if off is None or len(raw) < off + 20:
        return None
    if raw[off] >> 4 != 4:
        return None
    ihl = raw[off] & 0x0F
    if ihl < 5:
        return None
    ip_hlen = ihl * 4
    if len(raw) < off + ip_hlen:
        return None
    flags_frag = (raw[off + 6] << 8) | raw[off + 7]
    if flags_frag & 0x3FFF:  # MF set or nonzero fragment offset
        return None
    proto = raw[off + 9]
    l4 = off + ip_hlen
    if proto == TCP_PROTO:
        if len(raw) < l4 + 20:
            return None
        doff = raw[l4 + 12] >> 4
        if doff < 5:
            return None
        l4_len = doff * 4
        if len(raw) < l4 + l4_len:
            return None
    elif proto == UDP_PROTO:
        if len(raw) < l4 + 8:
            return None
        l4_len = 8
    else:
        return None
    key = FlowKey(
        src_addr=int.from_bytes(raw[off + 12 : off + 16], "big"),
        dst_addr=int.from_bytes(raw[off + 16 : off + 20], "big"),
        src_port=(raw[l4] << 8) | raw[l4 + 1],
        dst_port=(raw[l4 + 2] << 8) | raw[l4 + 3],
        protocol=proto,
    )
    return key, off, ip_hlen, l4_len


def _write_bits(cells: np.ndarray, cell_start: int, raw: bytes, byte_off: int, nbytes: int) -> None:
    bits = np.unpackbits(np.frombuffer(raw, np.uint8, count=nbytes, offset=byte_off))
    cells[cell_start : cell_start + nbytes * 8] = bits


def decode_packet(raw: bytes, link_type: LinkType):
    """Decode one captured frame into (FlowKey, 1024-cell int8 vector).

    Returns None (skip) for anything that is not a clean IPv4 TCP/UDP packet;
    the caller counts skips.  Pure function of (raw, link_type).
    """
    parsed = parse_packet(raw, link_type)
    if parsed is None:
        return None
    key, off, ip_hlen, l4_len = parsed
    cells = np.full(VECTOR_WIDTH, ABSENT, dtype=np.int8)
    _write_bits(cells, IPV4_START, raw, off, ip_hlen)
    l4 = off + ip_hlen
    if key.protocol == TCP_PROTO:
        _write_bits(cells, TCP_START, raw, l4, l4_len)
    else:
        _write_bits(cells, UDP_START, raw, l4, 8)
    return key, cells


def encode_headers(cells: np.ndarray) -> tuple[bytes, bytes]:
    """Pack present cells back into (ipv4_bytes, l4_bytes).

    Inverse of decode_packet for well-formed vectors; used by round-trip checks
    and debugging, not the serving path.
    """

    def pack(start: int, end: int) -> bytes:
        section = cells[start:end]
        present = section != ABSENT
        n = int(present.sum())
        if n == 0:
            return b""
        if n % 8 != 0 or not present[:n].all():
            raise ValueError("section has ragged or non-contiguous present cells")
        return np.packbits(section[:n].astype(np.uint8)).tobytes()

    ip = pack(IPV4_START, IPV4_END)
    tcp = pack(TCP_START, TCP_END)
    udp = pack(UDP_START, UDP_END)
    if not ip:
        raise ValueError("no IPv4 section present")
    if bool(tcp) == bool(udp):
        raise ValueError("exactly one transport section must be present")
    return ip, tcp or udp


@dataclass(slots=True)
class TimedPacket:
    """One admitted packet: key, raw frame, and both clocks.

    capture_time_us comes from the trace; ingest_time_us is the monotonic wall
    clock at decode.  The bit vector is materialized on demand so that packets
    which never reach a model are not featurized.
    """

    key: FlowKey
    raw: bytes
    link_type: LinkType
    capture_time_us: int
    ingest_time_us: int

    def vector(self) -> np.ndarray:
        decoded = decode_packet(self.raw, self.link_type)
        if decoded is None:  # unreachable for packets admitted via parse_packet
            raise ValueError("packet is not decodable")
        return decoded[1]


class CaptureError(Exception):
    """Fatal ingest error: unreadable/unknown capture file structure."""


_MAGIC_US_NATIVE = 0xA1B2C3D4
_MAGIC_US_SWAPPED = 0xD4C3B2A1
_MAGIC_NS_NATIVE = 0xA1B23C4D
_MAGIC_NS_SWAPPED = 0x4D3CB2A1


class PcapReader:
    """Sequential pcap reader; yields (raw bytes, capture_time_us) in file order.

    Accepts both byte orders and both the microsecond and nanosecond timestamp
    variants; timestamps are normalized to microseconds.
    """

    def __init__(self, path):
        self.path = str(path)
        self._fh = open(path, "rb")
        header = self._fh.read(24)
        if len(header) < 24:
            raise CaptureError(f"{self.path}: truncated global header at offset 0")
        magic = struct.unpack("<I", header[:4])[0]
        if magic == _MAGIC_US_NATIVE:
            self._endian, self._nanos = "<", False
        elif magic == _MAGIC_US_SWAPPED:
            self._endian, self._nanos = ">", False
        elif magic == _MAGIC_NS_NATIVE:
            self._endian, self._nanos = "<", True
        elif magic == _MAGIC_NS_SWAPPED:
            self._endian, self._nanos = ">", True
        else:
            raise CaptureError(f"{self.path}: unknown capture magic 0x{magic:08x} at offset 0")
        network = struct.unpack(self._endian + "HHiIII", header[4:])[5]
        try:
            self.link_type = LinkType(network)
        except ValueError:
            raise CaptureError(f"{self.path}: unsupported link type {network} at offset 20") from None
        self._offset = 24

    def __iter__(self) -> Iterator[tuple[bytes, int]]:
        unpack = struct.Struct(self._endian + "IIII").unpack
        div = 1000 if self._nanos else 1
        while True:
            hdr = self._fh.read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                raise CaptureError(f"{self.path}: truncated record header at offset {self._offset}")
            ts_sec, ts_frac, caplen, _ = unpack(hdr)
            data = self._fh.read(caplen)
            if len(data) < caplen:
                raise CaptureError(f"{self.path}: truncated record body at offset {self._offset + 16}")
            self._offset += 16 + caplen
            yield data, ts_sec * 1_000_000 + ts_frac // div

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "PcapReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_capture(path) -> PcapReader:
    return PcapReader(path)


def write_capture(path, packets, link_type: LinkType = LinkType.ETHERNET, snaplen: int = 65535) -> int:
    """Write a native-endian microsecond pcap; packets are (raw, capture_time_us).

    Returns the number of records written.
    """
    count = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", _MAGIC_US_NATIVE, 2, 4, 0, 0, snaplen, link_type.value))
        rec = struct.Struct("<IIII")
        for raw, ts_us in packets:
            fh.write(rec.pack(ts_us // 1_000_000, ts_us % 1_000_000, len(raw), len(raw)))
            fh.write(raw)
            count += 1
    return count


def dump_vectors_csv(rows, fh: IO[str]) -> None:
    """Debug dump: one "flow_key,cell_0,...,cell_1023" row per packet, ABSENT as -1."""
    writer = csv.writer(fh)
    writer.writerow(["flow_key"] + [f"cell_{i}" for i in range(VECTOR_WIDTH)])
    for key, cells in rows:
        writer.writerow([str(key)] + [int(c) for c in cells])
