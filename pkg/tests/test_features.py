import itertools
import random

import pytest

from uninet.assembler import SessionRecord, assemble_flows
from uninet.capture import Direction, PacketRecord, Protocol, TcpFlag, ip_to_int
from uninet.errors import ZeroMask
from uninet.features import (FLAG_CODE_OTHER, IN_OUT_RATIO_SENTINEL, as_row, feature_names,
                             flag_code, flow_features, packet_features, port_repr,
                             session_features, FlowFeatures, PacketFeatures, SessionFeatures)

F = TcpFlag
H = ip_to_int("10.0.0.2")
S = ip_to_int("1.1.1.1")

LISTED = {
    F.ACK: 1, F.SYN: 2, F.FIN: 3, F.PSH: 4, F.URG: 5, F.RST: 6, F.ECE: 7, F.CWR: 8, F.NS: 9,
    F.SYN | F.ACK: 10, F.PSH | F.ACK: 11, F.URG | F.ACK: 12, F.FIN | F.ACK: 13, F.RST | F.ACK: 14,
}


def test_listed_flag_combinations():
    for mask, code in LISTED.items():
        assert flag_code(int(mask)) == code


def test_uncommon_combination():
    assert flag_code(int(F.SYN | F.FIN | F.RST)) == 15


def test_exhaustive_mask_sweep():
    below = [m for m in range(1, 512) if flag_code(m) < 15]
    assert all(1 <= flag_code(m) <= 15 for m in range(1, 512))
    assert sorted(below) == sorted(int(m) for m in LISTED)
    with pytest.raises(ZeroMask):
        flag_code(0)


def test_port_repr_examples():
    assert port_repr(443) == 443
    assert port_repr(8080) == 1025
    assert port_repr(3306) == 1026
    assert port_repr(50000) == 1027
    assert port_repr(0) == 1027


def test_port_repr_total_and_idempotent():
    for p in range(65536):
        r = port_repr(p)
        assert 1 <= r <= 1027
        if r <= 1024:
            assert port_repr(r) == r


def _flow(times, sizes=None, flags=None, proto=Protocol.TCP, dirs=None):
    sizes = sizes or [100] * len(times)
    flags = flags or [0x10] * len(times)
    dirs = dirs or [Direction.OUTGOING] * len(times)
    recs = []
    for t, s, f, d in zip(times, sizes, flags, dirs):
        src, dst, sp, dp = (H, S, 5000, 443) if d is Direction.OUTGOING else (S, H, 443, 5000)
        recs.append(PacketRecord(t, src, dst, sp, dp, proto, s, f if proto is Protocol.TCP else 0, d))
    (flow,) = assemble_flows(recs)
    return flow


def test_packet_features_iat_and_order():
    assert [r.iat_micros for r in packet_features(_flow([0]))] == [0]
    assert [r.iat_micros for r in packet_features(_flow([0, 1500]))] == [0, 1500]
    rows = packet_features(_flow([0, 3, 9], sizes=[10, 20, 30]))
    assert [r.size_bytes for r in rows] == [10, 20, 30]
    assert len(feature_names(PacketFeatures)) == 6


def test_direction_coding():
    rows = packet_features(_flow([0, 1], dirs=[Direction.OUTGOING, Direction.INCOMING]))
    assert [r.direction for r in rows] == [0, 1]


def test_flow_features():
    ff = flow_features(_flow([0, 10], sizes=[100, 200]))
    assert (ff.total_bytes, ff.mean_pkt_size, ff.total_packets, ff.duration_micros) == (300, 150, 2, 10)
    assert flow_features(_flow([0, 1], proto=Protocol.UDP)).flag_code == FLAG_CODE_OTHER
    hs = _flow([0, 1, 2], flags=[int(F.SYN), int(F.SYN | F.ACK), int(F.ACK)],
               dirs=[Direction.OUTGOING, Direction.INCOMING, Direction.OUTGOING])
    assert flow_features(hs).flag_code == 10
    assert flow_features(hs).dst_port_repr == 443
    assert len(feature_names(FlowFeatures)) == 8


def test_packet_sizes_sum_to_flow_bytes():
    f = _flow(list(range(0, 50, 5)), sizes=[random.Random(1).randint(40, 1500) for _ in range(10)])
    assert sum(r.size_bytes for r in packet_features(f)) == flow_features(f).total_bytes


def _session(flows):
    return SessionRecord(H, 0, 10 ** 9, flows)


def test_session_single_flow():
    sf = session_features(_session([_flow([0, 1], sizes=[100, 200])]))
    assert sf.avg_flow_size == 300 and sf.std_flow_size == 0
    assert len(feature_names(SessionFeatures)) == 8


def test_session_population_std():
    f1 = _flow([0], sizes=[100])
    f2 = _flow([5], sizes=[300])
    f2.packets = [PacketRecord(5, H, S, 6000, 443, Protocol.TCP, 300, 0x10, Direction.OUTGOING)]
    sf = session_features(_session([f1, f2]))
    assert sf.avg_flow_size == 200 and sf.std_flow_size == 100


def test_session_all_outgoing():
    sf = session_features(_session([_flow([0, 1])]))
    assert sf.total_in_bytes == 0 and sf.in_out_ratio == 0


def test_session_all_incoming_uses_sentinel():
    sf = session_features(_session([_flow([0], dirs=[Direction.INCOMING])]))
    assert sf.in_out_ratio == IN_OUT_RATIO_SENTINEL


def test_session_ratio_is_scaled_and_floored():
    f = _flow([0, 1], sizes=[300, 100], dirs=[Direction.OUTGOING, Direction.INCOMING])
    assert session_features(_session([f])).in_out_ratio == 333


def test_session_features_order_independent():
    flows = [_flow([i * 10, i * 10 + 3], sizes=[50 * (i + 1), 7 * i + 40]) for i in range(4)]
    ref = as_row(session_features(_session(flows)))
    for perm in itertools.permutations(flows):
        got = as_row(session_features(_session(list(perm))))
        assert got == pytest.approx(ref, rel=1e-12)
