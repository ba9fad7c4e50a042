import numpy as np
import pytest

from uninet.codec import (CODEC_BINS, MASK_TOKEN, PAD_TOKEN, RESERVED_TOKENS, UNASSIGNED_TOKEN,
                          VOCAB_SIZE, BinningTable, EncodedExample, SegmentScheme, Tokenizer,
                          bin_value, bin_values, clean_extremes, derive_seed, deserialize_examples,
                          encode_flow, encode_session, fit_bins, read_examples_header,
                          serialize_examples)
from uninet.errors import (EmptyFeature, EmptySession, FormatVersionMismatch, MalformedLine,
                           UnknownFeature)

from oracles import brute_bin, random_sessions_tokens, sort_split_edges


def flow_parts(n_packets, rng=None, base=0):
    rng = rng or np.random.default_rng(base)
    return (rng.integers(0, 1039, 8), [rng.integers(0, 1039, 6) for _ in range(n_packets)])


def test_vocabulary_constants():
    assert VOCAB_SIZE == 1042 and MASK_TOKEN == 1040 and PAD_TOKEN == 1041
    assert list(RESERVED_TOKENS) == list(range(1028, 1039))
    assert UNASSIGNED_TOKEN == 1039
    assert CODEC_BINS == 1039


# -- binning -----------------------------------------------------------------

def test_identity_binning():
    t = fit_bins({"x": np.arange(1042)}, 1042)
    assert bin_values(t, "x", np.arange(1042)).tolist() == list(range(1042))


def test_identical_values_go_to_bin_zero():
    t = fit_bins({"x": [7.0] * 500}, 1042)
    assert t.features["x"].edges.size == 0
    assert bin_value(t, "x", 7.0) == 0


def test_uniform_occupancy_spread_and_oracle():
    v = np.arange(1, 10001, dtype=float)
    t = fit_bins({"x": v}, 1042)
    assert t.features["x"].edges.tolist() == sort_split_edges(v, 1042)
    counts = np.bincount(bin_values(t, "x", v), minlength=1042)
    assert counts.max() - counts.min() <= 1


def test_median_lands_mid_table():
    rng = np.random.default_rng(3)
    v = rng.permutation(np.arange(100_000, dtype=float))
    t = fit_bins({"x": v}, 1042)
    assert abs(bin_value(t, "x", float(np.median(v))) - 521) <= 1


def test_clamping():
    t = fit_bins({"x": np.arange(10.0, 2000.0)}, 1042)
    assert bin_value(t, "x", -5) == 0
    assert bin_value(t, "x", 10 ** 9) == 1041


def test_bins_match_brute_force_on_ties():
    rng = np.random.default_rng(5)
    v = rng.integers(0, 40, size=3000).astype(float)
    t = fit_bins({"x": v}, 64)
    edges = sort_split_edges(v, 64)
    assert t.features["x"].edges.tolist() == edges
    for q in np.linspace(-1, 39, 81):
        assert bin_value(t, "x", q) == brute_bin(edges, q)
    assert bin_value(t, "x", 39.5) == 63


def test_monotone():
    rng = np.random.default_rng(2)
    t = fit_bins({"x": rng.lognormal(3, 2, 5000)}, 1039)
    q = np.sort(rng.lognormal(3, 2.5, 2000))
    b = bin_values(t, "x", q)
    assert np.all(np.diff(b) >= 0)


def test_fit_errors():
    with pytest.raises(EmptyFeature):
        fit_bins({"x": []})
    t = fit_bins({"x": [1, 2, 3]})
    with pytest.raises(UnknownFeature):
        bin_value(t, "y", 1)


def test_clean_extremes():
    v = np.arange(100.0)
    assert clean_extremes(v, 0, 1).tolist() == v.tolist()
    w = np.r_[np.arange(99.0), 1e12]
    assert 1e12 not in clean_extremes(w, 0, 0.99)
    assert clean_extremes([], 0, 0.9).size == 0
    with pytest.raises(ValueError):
        clean_extremes(v, 0.5, 0.5)


def test_binning_table_persistence(tmp_path):
    t = fit_bins({"a": np.arange(50.0), "b": [1.0, 1.0, 2.0]}, 16)
    t.save(tmp_path / "b.json")
    u = BinningTable.load(tmp_path / "b.json")
    assert u.fingerprint() == t.fingerprint()
    assert u.features["a"].edges.tolist() == t.features["a"].edges.tolist()
    bad = t.to_dict()
    bad["version"] = 99
    with pytest.raises(FormatVersionMismatch):
        BinningTable.from_dict(bad)


def test_tokenizer_feature_tokens_stay_in_range():
    from uninet.features import PacketFeatures
    rows = [PacketFeatures(443, 1027, i % 2, 40 + i, 6, i * 17) for i in range(3000)]
    tok = Tokenizer.fit(packet_rows=rows)
    out = tok.packet_tokens(rows)
    assert out.shape == (3000, 6)
    assert out.min() >= 0 and out.max() <= 1038
    assert set(out[:, 2]) == {0, 1}


# -- layout ------------------------------------------------------------------

def test_one_flow_ten_packets():
    ex = encode_session(None, [flow_parts(10)])
    assert ex.n_tokens == 68
    assert int((ex.input == PAD_TOKEN).sum()) == 1932


def test_thirty_flows_truncate_to_seq_len():
    rng = np.random.default_rng(0)
    ex = encode_session(None, [flow_parts(10, rng) for _ in range(30)])
    assert len(ex) == 2000 and ex.n_tokens == 2000
    assert int((ex.input == PAD_TOKEN).sum()) == 0


def test_packet_cap_per_flow():
    ex = encode_session(None, [flow_parts(25)])
    assert ex.n_tokens == 68
    ex = encode_session(None, [flow_parts(25)], packets_per_flow_cap=None)
    assert ex.n_tokens == 8 + 25 * 6


def test_flow_with_400_packets():
    ft, pk = flow_parts(400)
    ex = encode_flow(ft, pk)
    assert ex.n_tokens == 2000 and int((ex.input == PAD_TOKEN).sum()) == 0
    assert ex.input[-6:].tolist() == pk[331].tolist()


def test_flow_with_one_packet():
    ft, pk = flow_parts(1)
    assert encode_flow(ft, pk).n_tokens == 14


def test_mask_count():
    ft, pk = flow_parts(10)
    ex = encode_session(None, [(ft, pk)], mask_ratio=0.4, seed=derive_seed(1, 2))
    assert int(ex.mask_index.sum()) == 27


def test_eta_zero():
    st, flows = random_sessions_tokens(np.random.default_rng(0))
    ex = encode_session(st, flows, mask_ratio=0.0)
    assert not ex.mask_index.any() and not ex.true_value.any()
    assert np.array_equal(ex.input, ex.plain_tokens())


def test_empty_session():
    with pytest.raises(EmptySession):
        encode_session(None, [])


def test_segment_labels_granularity():
    st = np.arange(8)
    ex = encode_session(st, [flow_parts(2), flow_parts(1)])
    seg = ex.segment_label[:ex.n_tokens].tolist()
    assert seg == [2] * 8 + [1] * 8 + [0] * 12 + [1] * 8 + [0] * 6


def test_segment_labels_flow_parity():
    st = np.arange(8)
    ex = encode_session(st, [flow_parts(2), flow_parts(1), flow_parts(1)], SegmentScheme.FLOW_PARITY)
    seg = ex.segment_label[:ex.n_tokens].tolist()
    assert seg == [0] * 8 + [1] * 20 + [0] * 14 + [1] * 14
    assert set(ex.segment_label.tolist()) <= {0, 1}


def test_masking_is_deterministic_per_seed():
    st, flows = random_sessions_tokens(np.random.default_rng(1))
    a = encode_session(st, flows, mask_ratio=0.4, seed=derive_seed(7, 3))
    b = encode_session(st, flows, mask_ratio=0.4, seed=derive_seed(7, 3))
    c = encode_session(st, flows, mask_ratio=0.4, seed=derive_seed(7, 4))
    assert a == b
    assert not np.array_equal(a.mask_index, c.mask_index)


def check_five_keys(ex: EncodedExample, plain: EncodedExample, eta: float):
    L = len(ex)
    assert all(len(getattr(ex, k)) == L for k in ("true_value", "mask_index", "segment_label"))
    m = ex.mask_index == 1
    assert np.all(ex.input[m] == MASK_TOKEN)
    assert np.all(ex.true_value[~m] == 0)
    assert np.all(ex.true_value[m] == plain.input[m])
    assert np.all(ex.input[~m] == plain.input[~m])
    n = plain.n_tokens
    assert int((ex.input != PAD_TOKEN).sum()) + int((ex.input == PAD_TOKEN).sum()) == L
    assert not np.any(m[n:])
    assert int(m.sum()) == int(np.floor(eta * n + 1e-9))
    assert np.array_equal(ex.plain_tokens(), plain.input)
    assert ex.input.min() >= 0 and ex.input.max() <= 1041


def test_five_key_invariants_small_sample():
    rng = np.random.default_rng(11)
    for i in range(60):
        st, flows = random_sessions_tokens(rng)
        plain = encode_session(st, flows)
        for eta in (0.0, 0.15, 0.4, 0.6):
            check_five_keys(encode_session(st, flows, mask_ratio=eta, seed=derive_seed(i, 0)), plain, eta)


# -- serialization -------------------------------------------------------------

def _examples(n=10):
    rng = np.random.default_rng(4)
    out = []
    for i in range(n):
        st, flows = random_sessions_tokens(rng, n_flows_max=6)
        out.append(encode_session(st, flows, mask_ratio=0.4, seed=derive_seed(0, i), sequence_label=i % 3))
    return out


def test_round_trip(tmp_path):
    exs = _examples()
    serialize_examples(exs, tmp_path / "e.jsonl", {"note": "x"})
    back, header = deserialize_examples(tmp_path / "e.jsonl", with_header=True)
    assert back == exs
    assert header["note"] == "x"
    assert read_examples_header(tmp_path / "e.jsonl")["format"] == "uninet-examples"
    assert all(b.input.dtype == e.input.dtype for b, e in zip(back, exs))


def test_truncated_file_reports_line(tmp_path):
    p = tmp_path / "e.jsonl"
    serialize_examples(_examples(3), p)
    data = p.read_text()
    p.write_text(data[:-40])
    with pytest.raises(MalformedLine) as ei:
        deserialize_examples(p)
    assert ei.value.line_no == 4


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert deserialize_examples(p) == []


def test_version_mismatch(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"format":"uninet-examples","version":2}\n')
    with pytest.raises(FormatVersionMismatch):
        deserialize_examples(p)
    p.write_text('{"format":"something-else","version":1}\n')
    with pytest.raises(FormatVersionMismatch):
        deserialize_examples(p)
