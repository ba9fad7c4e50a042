"""Packet-, flow- and session-level features.

All features are integers or floats ready for tokenization: categorical ones
(ports, direction, protocol, flag code) are already in token space, the rest
are binned later by :mod:`uninet.codec`.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import List, Sequence

from .assembler import FlowRecord, SessionRecord
from .capture import Direction, Protocol, TcpFlag
from .errors import ZeroMask

# flag order for single-flag codes 1..9
_SINGLE_FLAG_ORDER = (TcpFlag.ACK, TcpFlag.SYN, TcpFlag.FIN, TcpFlag.PSH, TcpFlag.URG,
                      TcpFlag.RST, TcpFlag.ECE, TcpFlag.CWR, TcpFlag.NS)
FLAG_CODES = {int(f): i + 1 for i, f in enumerate(_SINGLE_FLAG_ORDER)}
FLAG_CODES.update({
    int(TcpFlag.SYN | TcpFlag.ACK): 10,
    int(TcpFlag.PSH | TcpFlag.ACK): 11,
    int(TcpFlag.URG | TcpFlag.ACK): 12,
    int(TcpFlag.FIN | TcpFlag.ACK): 13,
    int(TcpFlag.RST | TcpFlag.ACK): 14,
})
FLAG_CODE_OTHER = 15

PORT_HTTP_ALT = 8080
PORT_MYSQL = 3306
PORT_TOKEN_HTTP_ALT = 1025
PORT_TOKEN_MYSQL = 1026
PORT_TOKEN_OTHER = 1027

PROTOCOL_CODES = {Protocol.TCP: 6, Protocol.UDP: 17, Protocol.OTHER: 255}
DIRECTION_CODES = {Direction.OUTGOING: 0, Direction.INCOMING: 1}

# in_out_ratio when nothing was sent out; larger than any finite ratio seen in practice
IN_OUT_RATIO_SENTINEL = 10 ** 12


def flag_code(mask: int) -> int:
    """Numeric code of a TCP flag combination (1..15)."""
    if mask == 0:
        raise ZeroMask("no TCP flags set")
    return FLAG_CODES.get(mask, FLAG_CODE_OTHER)


def port_repr(port: int) -> int:
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} outside 0..65535")
    if 1 <= port <= 1024:
        return port
    if port == PORT_HTTP_ALT:
        return PORT_TOKEN_HTTP_ALT
    if port == PORT_MYSQL:
        return PORT_TOKEN_MYSQL
    return PORT_TOKEN_OTHER


@dataclass(frozen=True)
class PacketFeatures:
    src_port_repr: int
    dst_port_repr: int
    direction: int
    size_bytes: int
    protocol: int
    iat_micros: int


@dataclass(frozen=True)
class FlowFeatures:
    src_port_repr: int
    dst_port_repr: int
    protocol: int
    duration_micros: int
    total_bytes: int
    total_packets: int
    flag_code: int
    mean_pkt_size: int


@dataclass(frozen=True)
class SessionFeatures:
    total_flows: int
    avg_flow_size: float
    std_flow_size: float
    avg_flow_duration: float
    std_flow_duration: float
    total_in_bytes: int
    total_out_bytes: int
    in_out_ratio: int


def feature_names(cls) -> List[str]:
    return [f.name for f in fields(cls)]


def as_row(features) -> tuple:
    return astuple(features)


def packet_features(flow: FlowRecord) -> List[PacketFeatures]:
    out = []
    prev = None
    for p in flow.packets:
        out.append(PacketFeatures(
            port_repr(p.src_port), port_repr(p.dst_port), DIRECTION_CODES[p.direction],
            p.size_bytes, PROTOCOL_CODES[p.protocol],
            0 if prev is None else p.ts_micros - prev))
        prev = p.ts_micros
    return out


def flow_features(flow: FlowRecord) -> FlowFeatures:
    total_bytes = sum(p.size_bytes for p in flow.packets)
    n = len(flow.packets)
    if flow.protocol is Protocol.TCP:
        mask = 0
        for p in flow.packets:
            mask |= p.tcp_flags
        code = flag_code(mask) if mask else FLAG_CODE_OTHER
    else:
        code = FLAG_CODE_OTHER
    return FlowFeatures(port_repr(flow.initiator_port), port_repr(flow.responder_port),
                        PROTOCOL_CODES[flow.protocol], flow.duration, total_bytes, n, code,
                        total_bytes // n)


def _mean_std(values: Sequence[float]):
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def session_features(session: SessionRecord) -> SessionFeatures:
    if not session.flows:
        raise ValueError("session has no flows")
    sizes = [sum(p.size_bytes for p in f.packets) for f in session.flows]
    durations = [f.duration for f in session.flows]
    avg_size, std_size = _mean_std(sizes)
    avg_dur, std_dur = _mean_std(durations)
    in_bytes = out_bytes = 0
    for f in session.flows:
        for p in f.packets:
            if p.direction is Direction.INCOMING:
                in_bytes += p.size_bytes
            else:
                out_bytes += p.size_bytes
    ratio = (1000 * in_bytes) // out_bytes if out_bytes else IN_OUT_RATIO_SENTINEL
    return SessionFeatures(len(session.flows), avg_size, std_size, avg_dur, std_dur,
                           in_bytes, out_bytes, ratio)
