import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uninet.capture import (Direction, InternalNetwork, PacketRecord, Protocol, TcpFlag,
                            ip_to_int, parse_header, parse_pcap, parse_record_line, pcap_bytes,
                            read_records, records_text, write_records, load_capture, write_pcap)
from uninet.errors import (BadMagic, FieldOutOfRange, MalformedLine, TruncatedHeader,
                           UnsupportedLinkType)

from oracles import ipv6_frame, pcap_by_hand, tcp_frame, udp_frame

A = bytes([10, 0, 0, 5])
B = bytes([93, 184, 216, 34])


def test_swapped_magic_udp_packet_parsed_field_by_field():
    data = pcap_by_hand(">", [(1_700_000_000, 250_000, udp_frame(A, B, 53000, 53))])
    assert struct.unpack("<I", data[:4])[0] == 0xD4C3B2A1
    cap = parse_pcap(data)
    assert cap.header.byte_order == ">"
    assert len(cap) == 1
    r = cap[0]
    assert r.ts_micros == 1_700_000_000_250_000
    assert r.src_ip == ip_to_int("10.0.0.5") and r.dst_ip == ip_to_int("93.184.216.34")
    assert (r.src_port, r.dst_port) == (53000, 53)
    assert r.protocol is Protocol.UDP
    assert r.size_bytes == 20 + 8 + 5
    assert r.tcp_flags == 0
    assert r.direction is Direction.OUTGOING
    assert r.tls_present is False


def test_both_byte_orders_give_identical_records():
    frames = [(100, 1, tcp_frame(A, B, 40000, 443, 0x02)),
              (100, 900, tcp_frame(B, A, 443, 40000, 0x12, b"\x16\x03\x01abc"))]
    le = parse_pcap(pcap_by_hand("<", frames))
    be = parse_pcap(pcap_by_hand(">", frames))
    assert le.records == be.records
    assert le[1].direction is Direction.INCOMING
    assert le[1].tcp_flags == int(TcpFlag.SYN | TcpFlag.ACK)


def test_header_only_capture_is_empty():
    cap = parse_pcap(pcap_by_hand("<", []))
    assert len(cap) == 0 and cap.skipped == 0 and cap.truncated == 0


def test_ipv6_frame_is_skipped_and_counted():
    cap = parse_pcap(pcap_by_hand("<", [(1, 0, ipv6_frame()), (2, 0, udp_frame(A, B, 1, 2))]))
    assert cap.skipped == 1
    assert len(cap) == 1


def test_vlan_tagged_frame_is_parsed():
    f = udp_frame(A, B, 5000, 123)
    tagged = f[:12] + b"\x81\x00\x00\x07" + f[12:]
    cap = parse_pcap(pcap_by_hand("<", [(1, 0, tagged)]))
    assert len(cap) == 1 and cap[0].dst_port == 123


def test_ns_flag_is_read_from_data_offset_byte():
    f = bytearray(tcp_frame(A, B, 1000, 80, 0x10))
    f[14 + 20 + 12] |= 0x01
    cap = parse_pcap(pcap_by_hand("<", [(1, 0, bytes(f))]))
    assert cap[0].tcp_flags == int(TcpFlag.NS | TcpFlag.ACK)


def test_nanosecond_magic_rejected():
    data = bytearray(pcap_by_hand("<", []))
    data[:4] = struct.pack("<I", 0xA1B23C4D)
    with pytest.raises(BadMagic):
        parse_pcap(bytes(data))


def test_unknown_magic_rejected():
    with pytest.raises(BadMagic):
        parse_pcap(b"\x00" * 24)


def test_short_header_raises_truncated_header():
    with pytest.raises(TruncatedHeader):
        parse_pcap(pcap_by_hand("<", [])[:23])


def test_non_ethernet_link_type_rejected():
    data = bytearray(pcap_by_hand("<", []))
    data[20:24] = struct.pack("<I", 101)
    with pytest.raises(UnsupportedLinkType):
        parse_header(bytes(data))


def test_truncated_record_is_counted_not_returned():
    data = pcap_by_hand("<", [(1, 0, udp_frame(A, B, 1, 2)), (2, 0, udp_frame(A, B, 3, 4))])
    cap = parse_pcap(data[:-3])
    assert len(cap) == 1 and cap.truncated == 1


def test_fuzzed_truncations_never_crash_or_invent_records():
    frames = [(10 + i, i, tcp_frame(A, B, 40000 + i, 80, 0x18, bytes(i * 7))) for i in range(6)]
    full = pcap_by_hand("<", frames)
    reference = parse_pcap(full).records
    rng = np.random.default_rng(0)
    for cut in rng.integers(0, len(full), size=300):
        try:
            cap = parse_pcap(full[:cut])
        except TruncatedHeader:
            assert cut < 24
            continue
        assert cap.records == reference[:len(cap.records)]


def test_frames_from_writer_round_trip():
    recs = [PacketRecord(1_000_000 + i, ip_to_int("10.0.0.1"), ip_to_int("8.8.8.8"), 5000 + i, 443,
                         Protocol.TCP, 52 + i, 0x18, Direction.OUTGOING, True) for i in range(3)]
    recs.append(PacketRecord(2_000_000, ip_to_int("8.8.8.8"), ip_to_int("10.0.0.1"), 53, 6000,
                             Protocol.UDP, 90, 0, Direction.INCOMING, False))
    for order in ("<", ">"):
        assert parse_pcap(pcap_bytes(recs, order)).records == recs


def test_internal_network_predicate_sets_direction():
    data = pcap_by_hand("<", [(1, 0, udp_frame(A, B, 1, 2))])
    cap = parse_pcap(data, InternalNetwork(["192.168.0.0/16"]))
    assert cap[0].direction is Direction.INCOMING


# -- interchange format ------------------------------------------------------

def _rec(**kw):
    base = dict(ts_micros=1, src_ip=ip_to_int("10.0.0.1"), dst_ip=ip_to_int("1.2.3.4"),
                src_port=1234, dst_port=80, protocol=Protocol.TCP, size_bytes=60, tcp_flags=2,
                direction=Direction.OUTGOING, tls_present=False)
    base.update(kw)
    return PacketRecord(**base)


def test_three_records_round_trip(tmp_path):
    recs = [_rec(), _rec(ts_micros=5, protocol=Protocol.UDP, tcp_flags=0),
            _rec(ts_micros=9, protocol=Protocol.OTHER, src_port=0, dst_port=0, tcp_flags=0,
                 direction=Direction.INCOMING, tls_present=True)]
    path = tmp_path / "r.csv"
    write_records(recs, path)
    assert read_records(path) == recs
    assert load_capture(path) == recs


def test_port_out_of_range_line():
    with pytest.raises(FieldOutOfRange) as ei:
        parse_record_line("1,10.0.0.1,1.2.3.4,70000,80,TCP,60,2,OUT,0", 7)
    assert ei.value.field == "src_port" and ei.value.line_no == 7


def test_other_protocol_with_flags_is_out_of_range():
    with pytest.raises(FieldOutOfRange):
        parse_record_line("1,10.0.0.1,1.2.3.4,0,0,OTHER,60,2,OUT,0")


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(records_text([_rec()]) + "1,2,3\n")
    with pytest.raises(MalformedLine) as ei:
        read_records(path)
    assert ei.value.line_no == 4


def test_load_capture_detects_pcap(tmp_path):
    recs = [_rec(size_bytes=80, tcp_flags=0x18)]
    write_pcap(recs, tmp_path / "x.pcap")
    assert load_capture(tmp_path / "x.pcap") == recs


ips = st.integers(0, 2 ** 32 - 1)
ports = st.integers(0, 65535)


@st.composite
def records(draw):
    proto = draw(st.sampled_from(list(Protocol)))
    sp, dp = (0, 0) if proto is Protocol.OTHER else (draw(ports), draw(ports))
    flags = draw(st.integers(0, 0x1FF)) if proto is Protocol.TCP else 0
    return PacketRecord(draw(st.integers(0, 2 ** 53)), draw(ips), draw(ips), sp, dp, proto,
                        draw(st.integers(0, 65535)), flags, draw(st.sampled_from(list(Direction))),
                        draw(st.booleans()))


@settings(max_examples=50, deadline=None)
@given(st.lists(records(), max_size=20))
def test_write_then_read_is_identity(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rt") / "r.csv"
    write_records(recs, path)
    assert read_records(path) == recs
