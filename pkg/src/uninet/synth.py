"""Deterministic synthetic traffic with labeled sessions.

Every session belongs to one internal host (a unique ``10.x.y.z`` address)
and one traffic class.  Class signatures, by construction:

``benign``
    A DNS lookup (UDP/53) then a web flow (TCP/443, sometimes 80): handshake,
    one to three exchanges with requests of 200..800 bytes and responses of
    400..1500 bytes, then a FIN exchange.  Mean packet size stays above 110.
``ddos``
    One or two TCP/80 flows: handshake, then 8..14 outgoing PSH/ACK packets of
    one identical size between 70 and 90 bytes at a regular, short interval and
    no answers.  Mean packet size stays below 90.
``scan``
    10..30 flows of a single SYN-only packet (44 or 60 bytes) to distinct
    random ports of one target.
``beacon``
    3..5 tiny two-packet flows (out ~120 bytes, in ~80 bytes) to one fixed
    high port, spaced by a fixed period.

Sites (``site_profile``) and device types (``DEVICE_PROFILES``) parameterise
the benign generator to produce per-class fingerprints for the website and
device classification pipelines.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ._io import atomic_write_text
from .capture import Direction, PacketRecord, Protocol, TcpFlag, ip_to_int, ip_to_str, records_text

PathLike = Union[str, os.PathLike]

BASE_TS = 1_700_000_000_000_000
SESSION_SPACING_MICROS = 2_000_000
HOST_BASE = ip_to_int("10.0.0.1")
RESOLVER_IP = ip_to_int("9.9.9.9")

SYN, ACK, PSH, FIN = int(TcpFlag.SYN), int(TcpFlag.ACK), int(TcpFlag.PSH), int(TcpFlag.FIN)
SYN_ACK, PSH_ACK, FIN_ACK = SYN | ACK, PSH | ACK, FIN | ACK

TCP_HEADER_BYTES = 52  # IPv4 + TCP with timestamps option


class TrafficClass(enum.Enum):
    BENIGN_BROWSING = "benign"
    DDOS_LIKE = "ddos"
    SCAN_LIKE = "scan"
    BEACON_LIKE = "beacon"


@dataclass(frozen=True)
class SiteProfile:
    """Knobs of the benign generator; one profile per website or device type."""

    name: str = "web"
    port: int = 443
    alt_port: Optional[int] = 80
    alt_port_prob: float = 0.1
    n_flows: Tuple[int, int] = (1, 1)
    exchanges: Tuple[int, int] = (1, 3)
    request_size: Tuple[int, int] = (200, 800)
    response_size: Tuple[int, int] = (400, 1500)
    response_packets: Tuple[int, int] = (1, 2)
    dns: bool = True
    gap_ms: Tuple[int, int] = (5, 80)
    protocol: str = "TCP"


DEFAULT_SITE = SiteProfile()

DEVICE_PROFILES: Dict[str, SiteProfile] = {
    "camera": SiteProfile("camera", port=554, alt_port=None, n_flows=(1, 1), exchanges=(3, 3),
                          request_size=(1200, 1500), response_size=(60, 80),
                          response_packets=(1, 1), dns=False, gap_ms=(30, 40)),
    "thermostat": SiteProfile("thermostat", port=8883, alt_port=None, n_flows=(1, 1),
                              exchanges=(1, 1), request_size=(90, 140), response_size=(70, 100),
                              response_packets=(1, 1), dns=True, gap_ms=(100, 300)),
    "speaker": SiteProfile("speaker", port=443, alt_port=None, n_flows=(1, 2), exchanges=(1, 2),
                           request_size=(300, 500), response_size=(1200, 1500),
                           response_packets=(2, 3), dns=True, gap_ms=(2, 10)),
    "plug": SiteProfile("plug", port=123, alt_port=None, n_flows=(1, 2), exchanges=(1, 1),
                        request_size=(76, 76), response_size=(76, 76), response_packets=(1, 1),
                        dns=False, gap_ms=(1, 3), protocol="UDP"),
    "hub": SiteProfile("hub", port=1883, alt_port=None, n_flows=(1, 2), exchanges=(1, 2),
                       request_size=(150, 400), response_size=(100, 300),
                       response_packets=(1, 1), dns=True, gap_ms=(20, 60)),
}


def site_profile(site_id: int, seed: int = 0) -> SiteProfile:
    """A reproducible website profile: object sizes and page structure fixed per site."""
    rng = np.random.default_rng([int(seed), 7919, int(site_id)])
    resp_lo = int(rng.integers(300, 1300))
    req_lo = int(rng.integers(150, 650))
    ex = int(rng.integers(1, 3))
    return SiteProfile(
        name=f"site{site_id}", port=443, alt_port=None, n_flows=(1, 1), exchanges=(ex, ex),
        request_size=(req_lo, req_lo + 60), response_size=(resp_lo, resp_lo + 150),
        response_packets=(int(rng.integers(1, 3)),) * 2, dns=bool(rng.integers(0, 2)),
        gap_ms=(int(rng.integers(2, 20)), int(rng.integers(30, 120))))


@dataclass
class ScenarioSpec:
    """What to generate.  ``class_mix`` maps class names to relative weights."""

    seed: int = 0
    n_sessions: int = 100
    class_mix: Mapping[str, float] = field(default_factory=lambda: {"benign": 1.0})
    profiles: Mapping[str, SiteProfile] = field(default_factory=dict)
    host_offset: int = 0

    def classes(self) -> List[str]:
        return list(self.class_mix)


@dataclass
class SyntheticCapture:
    records: List[PacketRecord]
    labels: Dict[int, str]  # host ip -> class name

    def labels_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ip", "label"])
        for ip in sorted(self.labels):
            w.writerow([ip_to_str(ip), self.labels[ip]])
        return buf.getvalue()

    def write(self, records_path: PathLike, labels_path: Optional[PathLike] = None) -> None:
        atomic_write_text(records_path, records_text(self.records))
        if labels_path is not None:
            atomic_write_text(labels_path, self.labels_text())


def read_labels(path: PathLike) -> Dict[int, str]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return {ip_to_int(row["ip"]): row["label"] for row in csv.DictReader(fh)}


# -- packet helpers ---------------------------------------------------------

class _Flow:
    """Accumulates packets of one connection initiated by ``host``."""

    def __init__(self, host, hport, peer, pport, proto: Protocol, t):
        self.host, self.hport, self.peer, self.pport, self.proto = host, hport, peer, pport, proto
        self.t = t
        self.packets: List[PacketRecord] = []

    def out(self, size, flags=0, dt=0):
        self.t += int(dt)
        self.packets.append(PacketRecord(self.t, self.host, self.peer, self.hport, self.pport,
                                         self.proto, int(size), flags, Direction.OUTGOING,
                                         self.pport == 443 and size > TCP_HEADER_BYTES))

    def inc(self, size, flags=0, dt=0):
        self.t += int(dt)
        self.packets.append(PacketRecord(self.t, self.peer, self.host, self.pport, self.hport,
                                         self.proto, int(size), flags, Direction.INCOMING,
                                         self.pport == 443 and size > TCP_HEADER_BYTES))


def _between(rng, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _ms(rng, lo_hi) -> int:
    return _between(rng, lo_hi) * 1000 + int(rng.integers(0, 1000))


def _external_ip(rng) -> int:
    return ip_to_int("93.0.0.0") + int(rng.integers(1, 1 << 22))


def _ephemeral(rng) -> int:
    return int(rng.integers(49152, 65536))


# -- class generators -------------------------------------------------------

def _dns(rng, host, t) -> _Flow:
    f = _Flow(host, _ephemeral(rng), RESOLVER_IP, 53, Protocol.UDP, t)
    f.out(int(rng.integers(60, 90)))
    f.inc(int(rng.integers(90, 300)), dt=rng.integers(5_000, 60_000))
    return f


def benign_session(rng, host: int, t0: int, profile: SiteProfile = DEFAULT_SITE) -> List[_Flow]:
    flows = []
    t = t0
    if profile.dns:
        flows.append(_dns(rng, host, t))
        t = flows[-1].t + int(rng.integers(1_000, 20_000))
    server = _external_ip(rng)
    proto = Protocol(profile.protocol)
    for _ in range(_between(rng, profile.n_flows)):
        port = profile.port
        if profile.alt_port is not None and rng.random() < profile.alt_port_prob:
            port = profile.alt_port
        f = _Flow(host, _ephemeral(rng), server, port, proto, t)
        if proto is Protocol.TCP:
            f.out(60, SYN)
            f.inc(60, SYN_ACK, dt=rng.integers(10_000, 50_000))
            f.out(TCP_HEADER_BYTES, ACK, dt=rng.integers(100, 1_000))
        for _ in range(_between(rng, profile.exchanges)):
            f.out(_between(rng, profile.request_size), PSH_ACK if proto is Protocol.TCP else 0,
                  dt=_ms(rng, profile.gap_ms))
            for k in range(_between(rng, profile.response_packets)):
                f.inc(_between(rng, profile.response_size),
                      (ACK if k else PSH_ACK) if proto is Protocol.TCP else 0,
                      dt=rng.integers(5_000, 40_000) if k == 0 else rng.integers(100, 2_000))
        if proto is Protocol.TCP:
            f.out(TCP_HEADER_BYTES, FIN_ACK, dt=rng.integers(1_000, 50_000))
            f.inc(TCP_HEADER_BYTES, FIN_ACK, dt=rng.integers(10_000, 40_000))
        flows.append(f)
        t = f.t + int(rng.integers(5_000, 200_000))
    return flows


def ddos_session(rng, host: int, t0: int, profile: Optional[SiteProfile] = None) -> List[_Flow]:
    target = _external_ip(rng)
    size = int(rng.integers(70, 91))
    flows = []
    t = t0
    for _ in range(int(rng.integers(1, 3))):
        f = _Flow(host, _ephemeral(rng), target, 80, Protocol.TCP, t)
        f.out(60, SYN)
        f.inc(60, SYN_ACK, dt=rng.integers(10_000, 30_000))
        f.out(TCP_HEADER_BYTES, ACK, dt=rng.integers(100, 500))
        step = int(rng.integers(8_000, 12_000))
        for _ in range(int(rng.integers(8, 15))):
            f.out(size, PSH_ACK, dt=step + int(rng.integers(0, 50)))
        flows.append(f)
        t = f.t + int(rng.integers(1_000, 20_000))
    return flows


def scan_session(rng, host: int, t0: int, profile: Optional[SiteProfile] = None) -> List[_Flow]:
    target = _external_ip(rng)
    sport = _ephemeral(rng)
    size = 44 if rng.random() < 0.5 else 60
    n = int(rng.integers(10, 31))
    ports = rng.choice(np.arange(1, 65536), size=n, replace=False)
    flows = []
    t = t0
    for p in ports:
        f = _Flow(host, sport, target, int(p), Protocol.TCP, t)
        f.out(size, SYN)
        flows.append(f)
        t += int(rng.integers(1_000, 5_000))
    return flows


def beacon_session(rng, host: int, t0: int, profile: Optional[SiteProfile] = None) -> List[_Flow]:
    c2 = _external_ip(rng)
    port = int(rng.choice([4444, 8443, 9001]))
    period = int(rng.choice([60, 90, 120])) * 1_000_000
    out_size = int(rng.integers(110, 131))
    flows = []
    for k in range(int(rng.integers(3, 6))):
        f = _Flow(host, _ephemeral(rng), c2, port, Protocol.TCP, t0 + k * period)
        f.out(out_size, PSH_ACK)
        f.inc(int(rng.integers(70, 91)), ACK, dt=rng.integers(20_000, 60_000))
        flows.append(f)
    return flows


GENERATORS = {
    TrafficClass.BENIGN_BROWSING.value: benign_session,
    TrafficClass.DDOS_LIKE.value: ddos_session,
    TrafficClass.SCAN_LIKE.value: scan_session,
    TrafficClass.BEACON_LIKE.value: beacon_session,
}


def _class_schedule(spec: ScenarioSpec) -> List[str]:
    """Deterministic class per session: largest-remainder apportionment, then shuffled."""
    names = list(spec.class_mix)
    w = np.array([float(spec.class_mix[k]) for k in names])
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("class_mix weights must be non-negative with a positive sum")
    quota = w / w.sum() * spec.n_sessions
    counts = np.floor(quota).astype(int)
    rest = spec.n_sessions - counts.sum()
    for i in np.argsort(-(quota - counts), kind="stable")[:rest]:
        counts[i] += 1
    labels = [n for n, c in zip(names, counts) for _ in range(c)]
    rng = np.random.default_rng([spec.seed, 1])
    return [labels[i] for i in rng.permutation(len(labels))]


def generate(spec: ScenarioSpec) -> SyntheticCapture:
    """Generate ``spec.n_sessions`` sessions, one host each, records sorted by time."""
    records: List[PacketRecord] = []
    labels: Dict[int, str] = {}
    for i, name in enumerate(_class_schedule(spec)):
        rng = np.random.default_rng([spec.seed, 2, i])
        host = HOST_BASE + spec.host_offset + i
        t0 = BASE_TS + i * SESSION_SPACING_MICROS + int(rng.integers(0, 1_000_000))
        if name in spec.profiles:
            flows = benign_session(rng, host, t0, spec.profiles[name])
        elif name in GENERATORS:
            flows = GENERATORS[name](rng, host, t0)
        else:
            raise ValueError(f"unknown traffic class {name!r} (no generator or profile)")
        labels[host] = name
        for f in flows:
            records.extend(f.packets)
    records.sort(key=lambda r: r.ts_micros)
    return SyntheticCapture(records, labels)
