"""Classic-pcap parsing and the line-oriented packet-record interchange format.

Only little/big-endian microsecond pcap over Ethernet II is accepted.  Every
IPv4 TCP or UDP frame becomes one :class:`PacketRecord`; anything else is
counted and skipped.  The parser never indexes past a record's captured
length, so truncated or corrupted input produces counters or a
:class:`~uninet.errors.CaptureError`, never a bogus record.
"""

from __future__ import annotations

import enum
import io
import ipaddress
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Iterator, List, Optional, Sequence, Union

from ._io import atomic_write_bytes
from .errors import (BadMagic, FieldOutOfRange, MalformedLine, TruncatedHeader,
                     UnsupportedLinkType)

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
PCAP_MAGIC_NANO = 0xA1B23C4D
PCAP_MAGIC_NANO_SWAPPED = 0x4D3CB2A1
LINKTYPE_ETHERNET = 1

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100

RECORDS_FORMAT = "uninet-records"
RECORDS_VERSION = 1
RECORD_FIELDS = ("ts_micros", "src_ip", "dst_ip", "src_port", "dst_port", "protocol",
                 "size_bytes", "tcp_flags", "direction", "tls_present")

PathLike = Union[str, os.PathLike]


class Protocol(enum.Enum):
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"


class Direction(enum.Enum):
    OUTGOING = "OUT"
    INCOMING = "IN"

    def flipped(self) -> "Direction":
        return Direction.INCOMING if self is Direction.OUTGOING else Direction.OUTGOING


class TcpFlag(enum.IntFlag):
    """TCP header flag bits, NS taken from the low bit of the data-offset byte."""

    FIN = 0x001
    SYN = 0x002
    RST = 0x004
    PSH = 0x008
    ACK = 0x010
    URG = 0x020
    ECE = 0x040
    CWR = 0x080
    NS = 0x100


ALL_FLAGS = 0x1FF


@dataclass(frozen=True)
class PacketRecord:
    ts_micros: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: Protocol
    size_bytes: int
    tcp_flags: int = 0
    direction: Direction = Direction.OUTGOING
    tls_present: bool = False

    def swapped(self) -> "PacketRecord":
        """The same packet seen with endpoints exchanged and direction flipped."""
        return PacketRecord(self.ts_micros, self.dst_ip, self.src_ip, self.dst_port,
                            self.src_port, self.protocol, self.size_bytes, self.tcp_flags,
                            self.direction.flipped(), self.tls_present)


def ip_to_int(ip: Union[str, int]) -> int:
    return int(ipaddress.IPv4Address(ip))


def ip_to_str(ip: int) -> str:
    return str(ipaddress.IPv4Address(ip))


class InternalNetwork:
    """Address predicate built from a CIDR list; ``net(ip)`` is True for internal hosts."""

    DEFAULT_CIDRS = ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")

    def __init__(self, cidrs: Optional[Sequence[str]] = None):
        cidrs = self.DEFAULT_CIDRS if cidrs is None else tuple(cidrs)
        self.cidrs = tuple(cidrs)
        self._ranges = []
        for c in cidrs:
            net = ipaddress.IPv4Network(c, strict=False)
            self._ranges.append((int(net.network_address), int(net.broadcast_address)))

    def __call__(self, ip: int) -> bool:
        return any(lo <= ip <= hi for lo, hi in self._ranges)

    def __repr__(self):
        return f"InternalNetwork({list(self.cidrs)!r})"


AddressPredicate = Callable[[int], bool]


def validate_record(r: PacketRecord, line_no: Optional[int] = None) -> PacketRecord:
    def bad(name, value):
        raise FieldOutOfRange(name, value, line_no)

    if r.ts_micros < 0:
        bad("ts_micros", r.ts_micros)
    for name in ("src_ip", "dst_ip"):
        v = getattr(r, name)
        if not 0 <= v <= 0xFFFFFFFF:
            bad(name, v)
    for name in ("src_port", "dst_port"):
        v = getattr(r, name)
        if not 0 <= v <= 0xFFFF:
            bad(name, v)
        if r.protocol is Protocol.OTHER and v != 0:
            bad(name, v)
    if r.size_bytes < 0:
        bad("size_bytes", r.size_bytes)
    if not 0 <= r.tcp_flags <= ALL_FLAGS:
        bad("tcp_flags", r.tcp_flags)
    if r.protocol is not Protocol.TCP and r.tcp_flags != 0:
        bad("tcp_flags", r.tcp_flags)
    return r


# -- pcap -------------------------------------------------------------------

@dataclass(frozen=True)
class RawCaptureHeader:
    magic: int
    version_major: int
    version_minor: int
    snaplen: int
    link_type: int
    byte_order: str  # struct prefix, "<" or ">"


@dataclass
class ParsedCapture:
    """Result of :func:`parse_pcap`; behaves like a sequence of records."""

    header: RawCaptureHeader
    records: List[PacketRecord] = field(default_factory=list)
    skipped: int = 0
    truncated: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[PacketRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def parse_header(data: bytes) -> RawCaptureHeader:
    if len(data) < GLOBAL_HEADER_LEN:
        raise TruncatedHeader(f"pcap global header needs {GLOBAL_HEADER_LEN} bytes, got {len(data)}")
    (magic,) = struct.unpack("<I", data[:4])
    if magic == PCAP_MAGIC:
        order = "<"
    elif magic == PCAP_MAGIC_SWAPPED:
        order = ">"
    elif magic in (PCAP_MAGIC_NANO, PCAP_MAGIC_NANO_SWAPPED):
        raise BadMagic(f"nanosecond pcap (magic {magic:#010x}) is not supported")
    else:
        raise BadMagic(f"unknown pcap magic {magic:#010x}")
    vmaj, vmin, _zone, _sigfigs, snaplen, link = struct.unpack(order + "HHiIII", data[4:24])
    if link != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"link type {link} (only Ethernet II = 1 is supported)")
    return RawCaptureHeader(struct.unpack(order + "I", data[:4])[0], vmaj, vmin, snaplen, link, order)


def _looks_like_tls(payload: bytes) -> bool:
    return (len(payload) >= 3 and 0x14 <= payload[0] <= 0x17
            and payload[1] == 0x03 and payload[2] <= 0x04)


def _decode_frame(frame: bytes, ts: int, internal: AddressPredicate):
    """Return a PacketRecord, ``"skip"`` for non-IPv4/TCP/UDP, or ``"trunc"``."""
    if len(frame) < ETH_HEADER_LEN:
        return "trunc"
    off = 12
    (etype,) = struct.unpack_from("!H", frame, off)
    off += 2
    if etype == ETHERTYPE_VLAN:
        if len(frame) < off + 4:
            return "trunc"
        (etype,) = struct.unpack_from("!H", frame, off + 2)
        off += 4
    if etype != ETHERTYPE_IPV4:
        return "skip"
    if len(frame) < off + 20:
        return "trunc"
    vihl, _tos, total_len, _ident, frag, _ttl, proto, _csum, src, dst = struct.unpack_from(
        "!BBHHHBBHII", frame, off)
    if vihl >> 4 != 4:
        return "skip"
    ihl = (vihl & 0x0F) * 4
    if ihl < 20:
        return "skip"
    if proto not in (6, 17) or (frag & 0x1FFF):
        return "skip"
    l4 = off + ihl
    if proto == 6:
        if len(frame) < l4 + 20:
            return "trunc"
        sport, dport, _seq, _ack, doff_ns, flags = struct.unpack_from("!HHIIBB", frame, l4)
        mask = ((doff_ns & 0x01) << 8) | flags
        doff = (doff_ns >> 4) * 4
        payload = frame[l4 + doff:off + total_len] if doff >= 20 else b""
        return PacketRecord(ts, src, dst, sport, dport, Protocol.TCP, total_len, mask,
                            Direction.OUTGOING if internal(src) else Direction.INCOMING,
                            _looks_like_tls(payload))
    if len(frame) < l4 + 8:
        return "trunc"
    sport, dport = struct.unpack_from("!HH", frame, l4)
    return PacketRecord(ts, src, dst, sport, dport, Protocol.UDP, total_len, 0,
                        Direction.OUTGOING if internal(src) else Direction.INCOMING, False)


def parse_pcap(data: bytes, internal_net: Optional[AddressPredicate] = None) -> ParsedCapture:
    """Parse a complete classic-pcap byte string."""
    internal = internal_net if internal_net is not None else InternalNetwork()
    header = parse_header(data)
    order = header.byte_order
    out = ParsedCapture(header)
    pos = GLOBAL_HEADER_LEN
    n = len(data)
    while pos < n:
        if n - pos < RECORD_HEADER_LEN:
            out.truncated += 1
            break
        ts_sec, ts_usec, incl, _orig = struct.unpack_from(order + "IIII", data, pos)
        pos += RECORD_HEADER_LEN
        if incl > n - pos:
            out.truncated += 1
            break
        frame = data[pos:pos + incl]
        pos += incl
        if ts_usec >= 1_000_000:
            out.skipped += 1
            continue
        rec = _decode_frame(frame, ts_sec * 1_000_000 + ts_usec, internal)
        if rec == "skip":
            out.skipped += 1
        elif rec == "trunc":
            out.truncated += 1
        else:
            out.records.append(rec)
    return out


def read_pcap(path: PathLike, internal_net: Optional[AddressPredicate] = None) -> ParsedCapture:
    with open(path, "rb") as fh:
        return parse_pcap(fh.read(), internal_net)


def _ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_frame(r: PacketRecord) -> bytes:
    """Ethernet II + IPv4 + TCP/UDP frame whose IPv4 total length is ``size_bytes``."""
    if r.protocol is Protocol.TCP:
        l4_len, proto = 20, 6
    elif r.protocol is Protocol.UDP:
        l4_len, proto = 8, 17
    else:
        raise ValueError("only TCP and UDP records can be written to pcap")
    tls = b"\x17\x03\x03" if r.tls_present and r.protocol is Protocol.TCP else b""
    payload_len = r.size_bytes - 20 - l4_len
    if payload_len < len(tls):
        raise FieldOutOfRange("size_bytes", r.size_bytes)
    payload = tls + bytes(payload_len - len(tls))
    if proto == 6:
        l4 = struct.pack("!HHIIBBHHH", r.src_port, r.dst_port, 0, 0,
                         (5 << 4) | ((r.tcp_flags >> 8) & 1), r.tcp_flags & 0xFF, 65535, 0, 0)
    else:
        l4 = struct.pack("!HHHH", r.src_port, r.dst_port, 8 + payload_len, 0)
    ip = struct.pack("!BBHHHBBHII", 0x45, 0, r.size_bytes, 0, 0x4000, 64, proto, 0,
                     r.src_ip, r.dst_ip)
    ip = ip[:10] + struct.pack("!H", _ipv4_checksum(ip)) + ip[12:]
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip + l4 + payload


def pcap_bytes(records: Iterable[PacketRecord], byte_order: str = "<", snaplen: int = 65535) -> bytes:
    if byte_order not in ("<", ">"):
        raise ValueError("byte_order must be '<' or '>'")
    buf = io.BytesIO()
    buf.write(struct.pack(byte_order + "IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
    for r in records:
        frame = build_frame(r)
        sec, usec = divmod(r.ts_micros, 1_000_000)
        buf.write(struct.pack(byte_order + "IIII", sec, usec, len(frame), len(frame)))
        buf.write(frame)
    return buf.getvalue()


def write_pcap(records: Iterable[PacketRecord], path: PathLike, byte_order: str = "<") -> None:
    atomic_write_bytes(path, pcap_bytes(records, byte_order))


# -- interchange format -----------------------------------------------------

def format_record(r: PacketRecord) -> str:
    return ",".join((str(r.ts_micros), ip_to_str(r.src_ip), ip_to_str(r.dst_ip),
                     str(r.src_port), str(r.dst_port), r.protocol.value, str(r.size_bytes),
                     str(r.tcp_flags), r.direction.value, "1" if r.tls_present else "0"))


def parse_record_line(line: str, line_no: int = 0) -> PacketRecord:
    parts = line.strip().split(",")
    if len(parts) != len(RECORD_FIELDS):
        raise MalformedLine(line_no, f"expected {len(RECORD_FIELDS)} fields, got {len(parts)}")
    ts, src, dst, sport, dport, proto, size, flags, direction, tls = parts
    try:
        src_ip, dst_ip = ip_to_int(src), ip_to_int(dst)
    except ValueError as exc:
        raise MalformedLine(line_no, f"bad address: {exc}") from None
    try:
        ts_i, sport_i, dport_i, size_i, flags_i, tls_i = (int(x) for x in (ts, sport, dport, size, flags, tls))
    except ValueError as exc:
        raise MalformedLine(line_no, f"bad integer: {exc}") from None
    try:
        protocol = Protocol(proto)
    except ValueError:
        raise MalformedLine(line_no, f"unknown protocol {proto!r}") from None
    try:
        dirn = Direction(direction)
    except ValueError:
        raise MalformedLine(line_no, f"unknown direction {direction!r}") from None
    if tls_i not in (0, 1):
        raise FieldOutOfRange("tls_present", tls_i, line_no)
    rec = PacketRecord(ts_i, src_ip, dst_ip, sport_i, dport_i, protocol, size_i, flags_i, dirn, bool(tls_i))
    return validate_record(rec, line_no)


def iter_records(lines: Iterable[str]) -> Iterator[PacketRecord]:
    for no, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        yield parse_record_line(line, no)


def read_records(path: PathLike) -> List[PacketRecord]:
    with open(path, "r", encoding="ascii") as fh:
        return list(iter_records(fh))


def records_text(records: Iterable[PacketRecord], header: Optional[str] = None) -> str:
    lines = [f"# {RECORDS_FORMAT} v{RECORDS_VERSION}" + (f" {header}" if header else ""),
             "# " + ",".join(RECORD_FIELDS)]
    for r in records:
        validate_record(r)
        lines.append(format_record(r))
    return "\n".join(lines) + "\n"


def write_records(records: Iterable[PacketRecord], path: PathLike, header: Optional[str] = None) -> None:
    atomic_write_bytes(path, records_text(records, header).encode("ascii"))


def load_capture(path: PathLike, internal_net: Optional[AddressPredicate] = None) -> List[PacketRecord]:
    """Read records from a pcap or interchange file, chosen by content."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) == 4 and struct.unpack("<I", head)[0] in (
            PCAP_MAGIC, PCAP_MAGIC_SWAPPED, PCAP_MAGIC_NANO, PCAP_MAGIC_NANO_SWAPPED):
        return read_pcap(path, internal_net).records
    return read_records(path)
