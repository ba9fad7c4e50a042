"""Bidirectional 5-tuple flows, endpoint sessions and sliding windows."""

from __future__ import annotations

import bisect
import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

from .capture import PacketRecord, Protocol
from .errors import NonPositiveWindow

DEFAULT_SILENCE_TIMEOUT = 60.0
DEFAULT_SESSION_WINDOW = 900.0


def _micros(seconds: float) -> int:
    return int(round(seconds * 1_000_000))


@dataclass(frozen=True, order=True)
class FlowKey:
    ip_a: int
    port_a: int
    ip_b: int
    port_b: int
    protocol: str

    @classmethod
    def of(cls, r: PacketRecord) -> "FlowKey":
        a, b = (r.src_ip, r.src_port), (r.dst_ip, r.dst_port)
        if b < a:
            a, b = b, a
        return cls(a[0], a[1], b[0], b[1], r.protocol.value)


@dataclass
class FlowRecord:
    key: FlowKey
    packets: List[PacketRecord]
    initiator: int = 0
    incomplete: bool = False

    @property
    def first_ts(self) -> int:
        return self.packets[0].ts_micros

    @property
    def last_ts(self) -> int:
        return self.packets[-1].ts_micros

    @property
    def duration(self) -> int:
        return self.last_ts - self.first_ts

    @property
    def protocol(self) -> Protocol:
        return self.packets[0].protocol

    @property
    def initiator_ip(self) -> int:
        return self.key.ip_a if self.initiator == 0 else self.key.ip_b

    @property
    def initiator_port(self) -> int:
        return self.key.port_a if self.initiator == 0 else self.key.port_b

    @property
    def responder_ip(self) -> int:
        return self.key.ip_b if self.initiator == 0 else self.key.ip_a

    @property
    def responder_port(self) -> int:
        return self.key.port_b if self.initiator == 0 else self.key.port_a

    def partial(self, packets: List[PacketRecord]) -> "FlowRecord":
        """A per-window view of this flow; marked incomplete if packets were dropped."""
        return FlowRecord(self.key, packets, self.initiator,
                          self.incomplete or len(packets) != len(self.packets))


def _sorted_records(records: Iterable[PacketRecord]) -> List[PacketRecord]:
    records = list(records)
    if any(records[i].ts_micros > records[i + 1].ts_micros for i in range(len(records) - 1)):
        # sorted() is stable, so equal timestamps keep input order
        records = sorted(records, key=lambda r: r.ts_micros)
    return records


def assemble_flows(records: Iterable[PacketRecord],
                   silence_timeout: float = DEFAULT_SILENCE_TIMEOUT) -> List[FlowRecord]:
    """Group packets into bidirectional flows; a silence gap longer than
    ``silence_timeout`` seconds between packets of one key starts a new flow.

    Output is ordered by first packet (creation order on ties).
    """
    gap = _micros(silence_timeout)
    open_flows: Dict[FlowKey, FlowRecord] = {}
    flows: List[FlowRecord] = []
    for r in _sorted_records(records):
        key = FlowKey.of(r)
        flow = open_flows.get(key)
        if flow is None or r.ts_micros - flow.packets[-1].ts_micros > gap:
            a = (key.ip_a, key.port_a)
            flow = FlowRecord(key, [r], initiator=0 if (r.src_ip, r.src_port) == a else 1)
            open_flows[key] = flow
            flows.append(flow)
        else:
            flow.packets.append(r)
    return flows


class SessionMode(enum.Enum):
    STATIC_WINDOW = "static"
    INACTIVITY = "inactivity"


class KeySide(enum.Enum):
    SRC = "src"
    DST = "dst"


@dataclass
class SessionRecord:
    endpoint: int
    window_start: int
    window_end: int
    flows: List[FlowRecord] = field(default_factory=list)

    @property
    def packets(self) -> List[PacketRecord]:
        pk = [p for f in self.flows for p in f.packets]
        pk.sort(key=lambda r: r.ts_micros)
        return pk


def assemble_sessions(flows: Sequence[FlowRecord],
                      mode: SessionMode = SessionMode.STATIC_WINDOW,
                      seconds: float = DEFAULT_SESSION_WINDOW,
                      key_side: KeySide = KeySide.SRC) -> List[SessionRecord]:
    """Aggregate flows per endpoint into sessions.

    ``STATIC_WINDOW``: consecutive windows of ``seconds`` anchored at the
    endpoint's first packet.  ``INACTIVITY``: a new session starts when the
    endpoint has been silent for more than ``seconds``.  Flows crossing a
    session boundary are cut into per-session partial flows flagged
    ``incomplete``.
    """
    if seconds <= 0:
        raise NonPositiveWindow(f"session period must be positive, got {seconds}")
    mode = SessionMode(mode)
    key_side = KeySide(key_side)
    span = _micros(seconds)

    by_endpoint: Dict[int, List[FlowRecord]] = defaultdict(list)
    for f in sorted(flows, key=lambda f: f.first_ts):
        ep = f.initiator_ip if key_side is KeySide.SRC else f.responder_ip
        by_endpoint[ep].append(f)

    sessions: List[SessionRecord] = []
    for ep, ep_flows in by_endpoint.items():
        if mode is SessionMode.STATIC_WINDOW:
            sessions.extend(_static_sessions(ep, ep_flows, span))
        else:
            sessions.extend(_inactivity_sessions(ep, ep_flows, span))
    sessions.sort(key=lambda s: (s.window_start, s.endpoint))
    return sessions


def _static_sessions(ep: int, flows: List[FlowRecord], span: int) -> List[SessionRecord]:
    anchor = min(f.first_ts for f in flows)
    buckets: Dict[int, List[FlowRecord]] = defaultdict(list)
    for f in flows:
        parts: Dict[int, List[PacketRecord]] = defaultdict(list)
        for p in f.packets:
            parts[(p.ts_micros - anchor) // span].append(p)
        for idx, pk in parts.items():
            buckets[idx].append(f.partial(pk) if len(parts) > 1 else f)
    out = []
    for idx in sorted(buckets):
        start = anchor + idx * span
        fl = sorted(buckets[idx], key=lambda f: f.first_ts)
        out.append(SessionRecord(ep, start, start + span - 1, fl))
    return out


def _inactivity_sessions(ep: int, flows: List[FlowRecord], gap: int) -> List[SessionRecord]:
    times = sorted(p.ts_micros for f in flows for p in f.packets)
    # session boundaries: first timestamp of each active period
    starts = [times[0]]
    for prev, cur in zip(times, times[1:]):
        if cur - prev > gap:
            starts.append(cur)
    ends = []
    for i, s in enumerate(starts):
        nxt = starts[i + 1] if i + 1 < len(starts) else None
        j = bisect.bisect_left(times, nxt) - 1 if nxt is not None else len(times) - 1
        ends.append(times[j])
    buckets: Dict[int, List[FlowRecord]] = defaultdict(list)
    for f in flows:
        parts: Dict[int, List[PacketRecord]] = defaultdict(list)
        for p in f.packets:
            parts[bisect.bisect_right(starts, p.ts_micros) - 1].append(p)
        for idx, pk in parts.items():
            buckets[idx].append(f.partial(pk) if len(parts) > 1 else f)
    return [SessionRecord(ep, starts[i], ends[i], sorted(buckets[i], key=lambda f: f.first_ts))
            for i in range(len(starts))]


class RecordWindow(NamedTuple):
    start: int
    end: int  # exclusive
    records: List[PacketRecord]


def sliding_window_view(records: Iterable[PacketRecord], window: float,
                        stride: float) -> List[RecordWindow]:
    """Windows ``[t, t + window)`` on a grid of ``stride`` seconds from the epoch.

    Only non-empty windows are returned.  A record belongs to every window
    that covers it, so it repeats when ``stride < window``.
    """
    if window <= 0 or stride <= 0:
        raise NonPositiveWindow(f"window and stride must be positive (got {window}, {stride})")
    recs = _sorted_records(records)
    if not recs:
        return []
    w, st = _micros(window), _micros(stride)
    ts = [r.ts_micros for r in recs]
    out = []
    # smallest grid start whose window still covers the first record
    k = (ts[0] - w) // st + 1
    while True:
        start = k * st
        lo = bisect.bisect_left(ts, start)
        if lo == len(ts):
            break
        hi = bisect.bisect_left(ts, start + w)
        if hi > lo:
            out.append(RecordWindow(start, start + w, recs[lo:hi]))
            k += 1
        else:
            # jump to the first grid start covering the next record
            k = max(k + 1, (ts[lo] - w) // st + 1)
    return out


def flow_packet_count(flows: Iterable[FlowRecord]) -> int:
    return sum(len(f.packets) for f in flows)


def sessions_packet_count(sessions: Iterable[SessionRecord]) -> int:
    return sum(flow_packet_count(s.flows) for s in sessions)


def flow_key_tuple(f: FlowRecord) -> Tuple:
    k = f.key
    return (k.ip_a, k.port_a, k.ip_b, k.port_b, k.protocol)
