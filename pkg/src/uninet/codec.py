"""T-Matrix codec: vocabulary, equal-frequency binning and example encoding.

Token space (1042 ids)::

    0            "0" of binary features (e.g. direction OUT)
    1..1024      well-known ports (port tokens equal the port number)
    1025 / 1026  ports 8080 / 3306
    1027         any other port
    1028..1038   reserved
    1039         unassigned, never emitted
    1040 / 1041  [MASK] / [PAD]

Continuous features are binned into ``CODEC_BINS`` (1039) equal-frequency
bins whose indices double as token ids 0..1038, so a bin can never collide
with MASK, PAD or the unassigned id.  Categorical features are emitted as
their own value (ports via their category, protocol by IANA number, flag
codes 1..15, direction 0/1).
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ._io import atomic_write_text, canonical_json, stable_hash
from .assembler import FlowRecord, SessionRecord
from .errors import (EmptyFeature, EmptySession, FormatVersionMismatch, MalformedLine,
                     UnknownFeature)
from .features import (FlowFeatures, PacketFeatures, SessionFeatures, flow_features,
                       packet_features, session_features)

VOCAB_SIZE = 1042
ZERO_TOKEN = 0
MASK_TOKEN = 1040
PAD_TOKEN = 1041
RESERVED_TOKENS = range(1028, 1039)
UNASSIGNED_TOKEN = 1039
CODEC_BINS = 1039
DEFAULT_BINS = 1042

DEFAULT_SEQ_LEN = 2000
DEFAULT_PACKETS_PER_FLOW_CAP = 10
FLOW_TOKENS = 8
PACKET_TOKENS = 6
SESSION_TOKENS = 8

BINNING_FORMAT = "uninet-binning"
BINNING_VERSION = 1
EXAMPLES_FORMAT = "uninet-examples"
EXAMPLES_VERSION = 1

PathLike = Union[str, os.PathLike]

# (feature, is_continuous) in emission order
PACKET_LAYOUT = (("src_port_repr", False), ("dst_port_repr", False), ("direction", False),
                 ("size_bytes", True), ("protocol", False), ("iat_micros", True))
FLOW_LAYOUT = (("src_port_repr", False), ("dst_port_repr", False), ("protocol", False),
               ("duration_micros", True), ("total_bytes", True), ("total_packets", True),
               ("flag_code", False), ("mean_pkt_size", True))
SESSION_LAYOUT = tuple((name, True) for name in (
    "total_flows", "avg_flow_size", "std_flow_size", "avg_flow_duration",
    "std_flow_duration", "total_in_bytes", "total_out_bytes", "in_out_ratio"))


# -- binning ----------------------------------------------------------------

@dataclass
class FeatureBins:
    edges: np.ndarray
    n_samples: int
    lo: float
    hi: float

    def to_dict(self) -> dict:
        return {"edges": [float(e) for e in self.edges], "n_samples": self.n_samples,
                "min": float(self.lo), "max": float(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureBins":
        return cls(np.asarray(d["edges"], dtype=np.float64), int(d["n_samples"]),
                   float(d["min"]), float(d["max"]))


@dataclass
class BinningTable:
    n_bins: int
    features: Dict[str, FeatureBins] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format": BINNING_FORMAT, "version": BINNING_VERSION, "n_bins": self.n_bins,
                "features": {k: v.to_dict() for k, v in sorted(self.features.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "BinningTable":
        if d.get("format") != BINNING_FORMAT:
            raise FormatVersionMismatch(f"not a binning table (format={d.get('format')!r})")
        if d.get("version") != BINNING_VERSION:
            raise FormatVersionMismatch(
                f"binning table version {d.get('version')} (expected {BINNING_VERSION})")
        return cls(int(d["n_bins"]), {k: FeatureBins.from_dict(v) for k, v in d["features"].items()})

    def fingerprint(self) -> str:
        return stable_hash(self.to_dict())

    def save(self, path: PathLike) -> None:
        atomic_write_text(path, canonical_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: PathLike) -> "BinningTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def clean_extremes(values, lower_q: float = 0.0, upper_q: float = 1.0) -> np.ndarray:
    """Drop values outside the ``[lower_q, upper_q]`` empirical quantiles."""
    if not 0.0 <= lower_q < upper_q <= 1.0:
        raise ValueError(f"need 0 <= lower_q < upper_q <= 1, got {lower_q}, {upper_q}")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    lo, hi = np.quantile(v, [lower_q, upper_q])
    return v[(v >= lo) & (v <= hi)]


def _fit_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    s = np.sort(values)
    n = s.size
    k = np.arange(1, n_bins, dtype=np.int64)
    # first sorted index of chunk k when element i goes to chunk floor(i * n_bins / n)
    idx = (k * n + n_bins - 1) // n_bins
    idx = idx[idx < n]
    edges = np.unique(s[idx])
    return edges[edges > s[0]]


def fit_bins(values: Mapping[str, Sequence[float]], n_bins: int = DEFAULT_BINS) -> BinningTable:
    """Equal-frequency cut points per feature.

    Sorted training values are split into ``n_bins`` chunks whose sizes
    differ by at most one; each chunk's first value becomes a cut point.
    Repeated cut points collapse, so heavily tied features use fewer bins.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    table = BinningTable(n_bins)
    for name, vals in values.items():
        v = np.asarray(vals, dtype=np.float64).ravel()
        if v.size == 0:
            raise EmptyFeature(f"feature {name!r} has no training values")
        table.features[name] = FeatureBins(_fit_edges(v, n_bins), int(v.size),
                                           float(v.min()), float(v.max()))
    return table


def bin_values(table: BinningTable, feature: str, values) -> np.ndarray:
    """Vectorized :func:`bin_value`."""
    try:
        fb = table.features[feature]
    except KeyError:
        raise UnknownFeature(feature) from None
    v = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(fb.edges, v, side="right")
    return np.where(v > fb.hi, table.n_bins - 1, idx).astype(np.int64)


def bin_value(table: BinningTable, feature: str, v: float) -> int:
    """Bin index of ``v``: the number of cut points ``<= v`` (bins are ``[c_k, c_{k+1})``).

    Values above the training maximum go to the top bin.
    """
    return int(bin_values(table, feature, [v])[0])


# -- tokenization -----------------------------------------------------------

def _columns(rows, layout) -> Dict[str, List[float]]:
    cols: Dict[str, List[float]] = {name: [] for name, cont in layout if cont}
    for r in rows:
        for name in cols:
            cols[name].append(getattr(r, name))
    return cols


class Tokenizer:
    """Turns feature rows into token ids using a fitted :class:`BinningTable`."""

    def __init__(self, table: BinningTable):
        self.table = table

    @classmethod
    def fit(cls, packet_rows: Iterable[PacketFeatures] = (), flow_rows: Iterable[FlowFeatures] = (),
            session_rows: Iterable[SessionFeatures] = (), n_bins: int = CODEC_BINS,
            lower_q: float = 0.0, upper_q: float = 1.0) -> "Tokenizer":
        values: Dict[str, np.ndarray] = {}
        for prefix, rows, layout in (("packet", packet_rows, PACKET_LAYOUT),
                                     ("flow", flow_rows, FLOW_LAYOUT),
                                     ("session", session_rows, SESSION_LAYOUT)):
            rows = list(rows)
            if not rows:
                continue
            for name, col in _columns(rows, layout).items():
                values[f"{prefix}.{name}"] = clean_extremes(col, lower_q, upper_q)
        return cls(fit_bins(values, n_bins))

    def _tokens(self, prefix, layout, rows) -> np.ndarray:
        rows = list(rows)
        out = np.empty((len(rows), len(layout)), dtype=np.int64)
        for j, (name, cont) in enumerate(layout):
            col = [getattr(r, name) for r in rows]
            out[:, j] = bin_values(self.table, f"{prefix}.{name}", col) if cont else col
        return out

    def packet_tokens(self, rows: Sequence[PacketFeatures]) -> np.ndarray:
        return self._tokens("packet", PACKET_LAYOUT, rows)

    def flow_tokens(self, rows: Sequence[FlowFeatures]) -> np.ndarray:
        return self._tokens("flow", FLOW_LAYOUT, rows)

    def session_tokens(self, rows: Sequence[SessionFeatures]) -> np.ndarray:
        return self._tokens("session", SESSION_LAYOUT, rows)


# -- five-key examples ------------------------------------------------------

class SegmentScheme(enum.Enum):
    GRANULARITY = "granularity"  # session 2, flow 1, packet 0
    FLOW_PARITY = "flow_parity"  # session 0, flows alternate 1, 0, 1, ...


@dataclass
class EncodedExample:
    input: np.ndarray
    true_value: np.ndarray
    mask_index: np.ndarray
    segment_label: np.ndarray
    sequence_label: int = 0

    def __len__(self):
        return int(self.input.shape[0])

    @property
    def n_tokens(self) -> int:
        """Length of the prefix that holds every non-PAD token."""
        nz = np.flatnonzero(self.input != PAD_TOKEN)
        return int(nz[-1]) + 1 if nz.size else 0

    def plain_tokens(self) -> np.ndarray:
        """Input with masked positions restored from ``true_value``."""
        return np.where(self.mask_index == 1, self.true_value, self.input)

    def __eq__(self, other):
        if not isinstance(other, EncodedExample):
            return NotImplemented
        return (self.sequence_label == other.sequence_label
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("input", "true_value", "mask_index", "segment_label")))


def derive_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(index)])


def _finish(tokens: List[int], segments: List[int], seq_len: int, mask_ratio: float,
            seed, label: int) -> EncodedExample:
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {mask_ratio}")
    tokens = tokens[:seq_len]
    segments = segments[:seq_len]
    n = len(tokens)
    inp = np.full(seq_len, PAD_TOKEN, dtype=np.int16)
    inp[:n] = tokens
    seg = np.zeros(seq_len, dtype=np.int8)
    seg[:n] = segments
    true = np.zeros(seq_len, dtype=np.int16)
    mask = np.zeros(seq_len, dtype=np.int8)
    n_mask = int(math.floor(mask_ratio * n + 1e-9))
    if n_mask:
        rng = np.random.default_rng(seed)
        pos = np.sort(rng.choice(n, size=n_mask, replace=False))
        true[pos] = inp[pos]
        inp[pos] = MASK_TOKEN
        mask[pos] = 1
    return EncodedExample(inp, true, mask, seg, int(label))


def encode_session(session_tokens: Optional[Sequence[int]],
                   flows: Sequence[Tuple[Sequence[int], Sequence[Sequence[int]]]],
                   scheme: SegmentScheme = SegmentScheme.GRANULARITY,
                   seq_len: int = DEFAULT_SEQ_LEN, mask_ratio: float = 0.0, seed=0,
                   sequence_label: int = 0,
                   packets_per_flow_cap: Optional[int] = DEFAULT_PACKETS_PER_FLOW_CAP,
                   include_flow_tokens: bool = True) -> EncodedExample:
    """Lay out ``[session][flow, packets...][flow, packets...]...`` then pad/truncate and mask.

    ``flows`` holds ``(flow_tokens, [packet_tokens, ...])`` in arrival order.
    With ``include_flow_tokens=False`` only packet rows follow the session
    prefix.
    """
    scheme = SegmentScheme(scheme)
    if not flows and session_tokens is None:
        raise EmptySession("session has neither session features nor flows")
    toks: List[int] = []
    segs: List[int] = []
    if session_tokens is not None:
        toks.extend(int(t) for t in session_tokens)
        segs.extend([2 if scheme is SegmentScheme.GRANULARITY else 0] * len(session_tokens))
    for j, (flow_toks, pkts) in enumerate(flows):
        if len(toks) >= seq_len:
            break
        parity = 1 - (j % 2)
        if packets_per_flow_cap is not None:
            pkts = pkts[:packets_per_flow_cap]
        if include_flow_tokens:
            toks.extend(int(t) for t in flow_toks)
            segs.extend([1 if scheme is SegmentScheme.GRANULARITY else parity] * len(flow_toks))
        for row in pkts:
            toks.extend(int(t) for t in row)
            segs.extend([0 if scheme is SegmentScheme.GRANULARITY else parity] * len(row))
    return _finish(toks, segs, seq_len, mask_ratio, seed, sequence_label)


def encode_flow(flow_tokens: Sequence[int], packet_tokens: Sequence[Sequence[int]],
                scheme: SegmentScheme = SegmentScheme.GRANULARITY,
                seq_len: int = DEFAULT_SEQ_LEN, mask_ratio: float = 0.0, seed=0,
                sequence_label: int = 0) -> EncodedExample:
    """One flow followed by as many of its packets as fit in ``seq_len``."""
    capacity = max(0, (seq_len - len(flow_tokens)) // PACKET_TOKENS)
    return encode_session(None, [(flow_tokens, list(packet_tokens)[:capacity])], scheme,
                          seq_len, mask_ratio, seed, sequence_label, packets_per_flow_cap=None)


# -- record-level helpers ---------------------------------------------------

def flow_token_parts(tokenizer: Tokenizer, flow: FlowRecord):
    ft = tokenizer.flow_tokens([flow_features(flow)])[0]
    pt = tokenizer.packet_tokens(packet_features(flow))
    return ft, pt


def session_token_parts(tokenizer: Tokenizer, session: SessionRecord, with_session: bool = True):
    st = tokenizer.session_tokens([session_features(session)])[0] if with_session else None
    return st, [flow_token_parts(tokenizer, f) for f in session.flows]


def session_packet_only_parts(tokenizer: Tokenizer, session: SessionRecord):
    """Session tokens plus all packets of the session in arrival order, as one pseudo-flow."""
    st = tokenizer.session_tokens([session_features(session)])[0]
    rows = []
    for f in session.flows:
        for p, pf in zip(f.packets, packet_features(f)):
            rows.append((p.ts_micros, pf))
    rows.sort(key=lambda x: x[0])
    pt = tokenizer.packet_tokens([pf for _, pf in rows]) if rows else np.zeros((0, PACKET_TOKENS), np.int64)
    return st, pt


# -- serialization ----------------------------------------------------------

_ARRAY_KEYS = ("input", "true_value", "mask_index", "segment_label")
_PAD_VALUES = {"input": PAD_TOKEN, "true_value": 0, "mask_index": 0, "segment_label": 0}


def _example_to_json(ex: EncodedExample) -> str:
    n = len(ex)
    keep = 0
    for k in _ARRAY_KEYS:
        nz = np.flatnonzero(getattr(ex, k) != _PAD_VALUES[k])
        if nz.size:
            keep = max(keep, int(nz[-1]) + 1)
    rec = {"length": n, "sequence_label": int(ex.sequence_label)}
    for k in _ARRAY_KEYS:
        rec[k] = getattr(ex, k)[:keep].tolist()
    return json.dumps(rec, separators=(",", ":"))


def _example_from_json(rec: dict) -> EncodedExample:
    n = int(rec["length"])
    dtypes = {"input": np.int16, "true_value": np.int16, "mask_index": np.int8, "segment_label": np.int8}
    arrays = {}
    for k in _ARRAY_KEYS:
        vals = rec[k]
        if len(vals) > n:
            raise ValueError(f"{k} longer than declared length")
        a = np.full(n, _PAD_VALUES[k], dtype=dtypes[k])
        a[:len(vals)] = vals
        arrays[k] = a
    return EncodedExample(sequence_label=int(rec["sequence_label"]), **arrays)


def examples_text(examples: Iterable[EncodedExample], meta: Optional[dict] = None) -> str:
    header = {"format": EXAMPLES_FORMAT, "version": EXAMPLES_VERSION}
    header.update(meta or {})
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines.extend(_example_to_json(ex) for ex in examples)
    return "\n".join(lines) + "\n"


def serialize_examples(examples: Iterable[EncodedExample], path: PathLike,
                       meta: Optional[dict] = None) -> None:
    """Write examples as JSON lines after a header line carrying format, version and ``meta``."""
    atomic_write_text(path, examples_text(examples, meta))


def read_examples_header(path: PathLike) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if not first.strip():
        return {}
    return _parse_header(first)


def _parse_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(1, f"bad header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != EXAMPLES_FORMAT:
        raise FormatVersionMismatch(f"not an examples file (header {line.strip()[:80]!r})")
    if header.get("version") != EXAMPLES_VERSION:
        raise FormatVersionMismatch(
            f"examples file version {header.get('version')} (expected {EXAMPLES_VERSION})")
    return header


def deserialize_examples(path: PathLike, with_header: bool = False):
    """Inverse of :func:`serialize_examples`; an empty file yields no examples."""
    out: List[EncodedExample] = []
    header: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines and text:
        # missing final newline means the writer was cut off
        raise MalformedLine(len(lines), "truncated record (no terminating newline)")
    for no, line in enumerate(lines, start=1):
        if no == 1:
            header = _parse_header(line)
            continue
        try:
            out.append(_example_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(no, f"bad example record: {exc}") from None
    return (out, header) if with_header else out
