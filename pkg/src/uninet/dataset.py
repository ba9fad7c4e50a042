"""Glue between assembled traffic and encoded examples: session files,
tokenizer fitting and example construction under a config tree."""

from __future__ import annotations

import json
import os
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ._io import atomic_write_text
from .assembler import (FlowKey, FlowRecord, KeySide, SessionMode, SessionRecord,
                        assemble_flows, assemble_sessions)
from .capture import Direction, PacketRecord, Protocol
from .codec import (EncodedExample, SegmentScheme, Tokenizer, derive_seed, encode_flow,
                    encode_session, flow_token_parts, session_packet_only_parts,
                    session_token_parts)
from .errors import FormatVersionMismatch, MalformedLine
from .features import flow_features, packet_features, session_features
from .model import ModelConfig
from .training import LrSchedule

PathLike = Union[str, os.PathLike]

SESSIONS_FORMAT = "uninet-sessions"
SESSIONS_VERSION = 1


# -- session files ----------------------------------------------------------

def _packet_row(p: PacketRecord) -> list:
    return [p.ts_micros, p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.protocol.value,
            p.size_bytes, p.tcp_flags, p.direction.value, int(p.tls_present)]


def _packet_from_row(row) -> PacketRecord:
    return PacketRecord(int(row[0]), int(row[1]), int(row[2]), int(row[3]), int(row[4]),
                        Protocol(row[5]), int(row[6]), int(row[7]), Direction(row[8]), bool(row[9]))


def sessions_text(sessions: Iterable[SessionRecord], meta: Optional[dict] = None) -> str:
    header = {"format": SESSIONS_FORMAT, "version": SESSIONS_VERSION}
    header.update(meta or {})
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for s in sessions:
        lines.append(json.dumps({
            "endpoint": s.endpoint, "window_start": s.window_start, "window_end": s.window_end,
            "flows": [{"key": [f.key.ip_a, f.key.port_a, f.key.ip_b, f.key.port_b, f.key.protocol],
                       "initiator": f.initiator, "incomplete": f.incomplete,
                       "packets": [_packet_row(p) for p in f.packets]} for f in s.flows],
        }, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def write_sessions(sessions: Iterable[SessionRecord], path: PathLike, meta: Optional[dict] = None):
    atomic_write_text(path, sessions_text(sessions, meta))


def read_sessions(path: PathLike) -> Tuple[List[SessionRecord], dict]:
    out: List[SessionRecord] = []
    header: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(no, f"bad JSON: {exc}") from None
            if no == 1:
                if rec.get("format") != SESSIONS_FORMAT:
                    raise FormatVersionMismatch(f"{path} is not a sessions file")
                if rec.get("version") != SESSIONS_VERSION:
                    raise FormatVersionMismatch(
                        f"sessions file version {rec.get('version')} (expected {SESSIONS_VERSION})")
                header = rec
                continue
            try:
                flows = [FlowRecord(FlowKey(*f["key"]), [_packet_from_row(r) for r in f["packets"]],
                                    f["initiator"], f["incomplete"]) for f in rec["flows"]]
                out.append(SessionRecord(rec["endpoint"], rec["window_start"], rec["window_end"], flows))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedLine(no, f"bad session record: {exc}") from None
    return out, header


# -- config-driven construction ---------------------------------------------

def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def lr_schedule(cfg: dict) -> LrSchedule:
    t = cfg["train"]
    return LrSchedule(t["lr_start"], t["lr_peak"], t["warmup_steps"])


def sessions_from_records(records: Sequence[PacketRecord], cfg: dict) -> List[SessionRecord]:
    flows = assemble_flows(records, cfg["flow"]["silence_timeout"])
    s = cfg["session"]
    return assemble_sessions(flows, SessionMode(s["mode"]), s["seconds"], KeySide(s["key_side"]))


def fit_tokenizer(sessions: Sequence[SessionRecord], cfg: dict,
                  flows: Optional[Sequence[FlowRecord]] = None) -> Tokenizer:
    """Fit bins on packets, flows and (when ``flows`` is None) sessions."""
    c = cfg["codec"]
    prows, frows, srows = [], [], []
    flow_list = list(flows) if flows is not None else [f for s in sessions for f in s.flows]
    for f in flow_list:
        frows.append(flow_features(f))
        prows.extend(packet_features(f))
    if flows is None:
        srows = [session_features(s) for s in sessions]
    return Tokenizer.fit(prows, frows, srows, n_bins=c["n_bins"], lower_q=c["clean_lower_q"],
                         upper_q=c["clean_upper_q"])


def encode_sessions(sessions: Sequence[SessionRecord], tokenizer: Tokenizer, cfg: dict,
                    labels: Optional[Sequence[int]] = None, mask_ratio: Optional[float] = None,
                    seed: int = 0, level: Optional[str] = None) -> List[EncodedExample]:
    c = cfg["codec"]
    level = level or c["level"]
    eta = c["mask_ratio"] if mask_ratio is None else mask_ratio
    scheme = SegmentScheme(c["segment_scheme"])
    out = []
    for i, s in enumerate(sessions):
        y = 0 if labels is None else int(labels[i])
        rs = derive_seed(seed, i)
        if level == "session_packets":
            st, pt = session_packet_only_parts(tokenizer, s)
            out.append(encode_session(st, [((), list(pt))], scheme, c["seq_len"], eta, rs, y,
                                      packets_per_flow_cap=None, include_flow_tokens=False))
        else:
            st, parts = session_token_parts(tokenizer, s)
            out.append(encode_session(st, parts, scheme, c["seq_len"], eta, rs, y,
                                      c["packets_per_flow_cap"]))
    return out


def encode_flows(flows: Sequence[FlowRecord], tokenizer: Tokenizer, cfg: dict,
                 labels: Optional[Sequence[int]] = None, mask_ratio: Optional[float] = None,
                 seed: int = 0) -> List[EncodedExample]:
    c = cfg["codec"]
    eta = c["mask_ratio"] if mask_ratio is None else mask_ratio
    scheme = SegmentScheme(c["segment_scheme"])
    out = []
    for i, f in enumerate(flows):
        ft, pt = flow_token_parts(tokenizer, f)
        out.append(encode_flow(ft, list(pt), scheme, c["seq_len"], eta, derive_seed(seed, i),
                               0 if labels is None else int(labels[i])))
    return out


def label_ids(names: Sequence[str], classes: Sequence[str]) -> List[int]:
    index = {c: i for i, c in enumerate(classes)}
    return [index[n] for n in names]
