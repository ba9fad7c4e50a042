import numpy as np

from uninet.assembler import assemble_flows, assemble_sessions, sessions_packet_count
from uninet.capture import parse_pcap, pcap_bytes, records_text
from uninet.features import flow_features
from uninet.synth import (DEVICE_PROFILES, ScenarioSpec, SyntheticCapture, generate, read_labels,
                          site_profile)


def sessions_by_label(cap: SyntheticCapture):
    out = {}
    for s in assemble_sessions(assemble_flows(cap.records)):
        out.setdefault(cap.labels[s.endpoint], []).append(s)
    return out


def test_same_seed_identical_bytes():
    spec = ScenarioSpec(seed=4, n_sessions=30, class_mix={"benign": 1, "ddos": 1, "scan": 1, "beacon": 1})
    a, b = generate(spec), generate(spec)
    assert records_text(a.records) == records_text(b.records)
    assert a.labels_text() == b.labels_text()
    c = generate(ScenarioSpec(seed=5, n_sessions=30, class_mix=spec.class_mix))
    assert records_text(a.records) != records_text(c.records)


def test_ddos_data_packets_share_one_size():
    cap = generate(ScenarioSpec(seed=1, n_sessions=20, class_mix={"ddos": 1}))
    for s in sessions_by_label(cap)["ddos"]:
        sizes = {p.size_bytes for f in s.flows for p in f.packets if p.tcp_flags == 0x18}
        assert len(sizes) == 1


def test_scan_flows_are_single_syn():
    cap = generate(ScenarioSpec(seed=2, n_sessions=10, class_mix={"scan": 1}))
    for s in sessions_by_label(cap)["scan"]:
        assert len(s.flows) >= 10
        for f in s.flows:
            assert len(f.packets) == 1
            assert flow_features(f).flag_code == 2


def test_beacon_flows_are_periodic():
    cap = generate(ScenarioSpec(seed=3, n_sessions=10, class_mix={"beacon": 1}))
    for s in sessions_by_label(cap)["beacon"]:
        starts = np.diff([f.first_ts for f in s.flows])
        assert len(set(starts.tolist())) == 1 and starts[0] in (60e6, 90e6, 120e6)


def test_stream_invariants_and_pcap_path():
    spec = ScenarioSpec(seed=6, n_sessions=40, class_mix={"benign": 2, "ddos": 1, "scan": 1, "beacon": 1})
    cap = generate(spec)
    ts = [r.ts_micros for r in cap.records]
    assert ts == sorted(ts)
    sessions = assemble_sessions(assemble_flows(cap.records))
    assert sessions_packet_count(sessions) == len(cap.records)
    assert {s.endpoint for s in sessions} == set(cap.labels)
    assert parse_pcap(pcap_bytes(cap.records)).records == cap.records


def test_mean_size_stump_separates_ddos_from_benign():
    cap = generate(ScenarioSpec(seed=7, n_sessions=1000, class_mix={"benign": 1, "ddos": 1}))
    groups = sessions_by_label(cap)
    x, y = [], []
    for label, sessions in groups.items():
        for s in sessions:
            x.append(np.mean([p.size_bytes for p in s.packets]))
            y.append(label == "ddos")
    x, y = np.array(x), np.array(y)
    assert len(x) == 1000
    best = 0.0
    for t in np.unique(x):
        for sign in (True, False):
            pred = (x <= t) if sign else (x > t)
            best = max(best, float(np.mean(pred == y)))
    assert best >= 0.99


def test_profiles_and_labels_file(tmp_path):
    mix = {name: 1 for name in DEVICE_PROFILES}
    cap = generate(ScenarioSpec(seed=8, n_sessions=25, class_mix=mix, profiles=DEVICE_PROFILES))
    assert set(cap.labels.values()) == set(DEVICE_PROFILES)
    cap.write(tmp_path / "r.csv", tmp_path / "l.csv")
    assert read_labels(tmp_path / "l.csv") == cap.labels
    assert site_profile(3, 1) == site_profile(3, 1)
    assert site_profile(3, 1) != site_profile(4, 1)


def test_host_offset_moves_hosts():
    a = generate(ScenarioSpec(seed=0, n_sessions=3, host_offset=0))
    b = generate(ScenarioSpec(seed=0, n_sessions=3, host_offset=100))
    assert set(a.labels).isdisjoint(b.labels)
