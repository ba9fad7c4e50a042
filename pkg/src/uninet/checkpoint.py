"""Model checkpoint container.

Layout::

    b"UNINETCK"              magic
    uint32 LE                format version
    uint64 LE                header length H
    H bytes                  canonical JSON header (sorted keys)
    array bytes              little-endian float64, in header order

The header records the model config, every array's name/shape/offset, the
head type and its metadata (e.g. a fitted threshold), optimizer hyper
parameters and step counter, the seed, the binning table and its
fingerprint, vocabulary constants and free-form metadata.  Nothing
time-dependent is stored, so identical training runs give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from ._io import atomic_write_bytes, canonical_json
from .codec import MASK_TOKEN, PAD_TOKEN, VOCAB_SIZE, BinningTable
from .errors import ArtifactVersionMismatch, FormatVersionMismatch
from .heads import head_meta, make_head
from .model import ModelConfig, Params
from .training import Adam

PathLike = Union[str, os.PathLike]

MAGIC = b"UNINETCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    head: object
    binning: Optional[BinningTable] = None
    optimizer: Optional[Adam] = None
    step: int = 0
    seed: int = 0
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def binning_fingerprint(self) -> Optional[str]:
        return None if self.binning is None else self.binning.fingerprint()

    def check_binning(self, fingerprint: Optional[str]) -> None:
        """Raise if examples were encoded with a different binning table."""
        mine = self.binning_fingerprint
        if fingerprint is not None and mine is not None and fingerprint != mine:
            raise ArtifactVersionMismatch(
                f"examples were encoded with binning {fingerprint}, checkpoint expects {mine}")

    def to_bytes(self) -> bytes:
        arrays = {}
        for k, v in self.params.items():
            arrays["encoder/" + k] = v
        for k, v in self.head.params.items():
            arrays["head/" + k] = v
        if self.optimizer is not None:
            for k, v in self.optimizer.arrays().items():
                arrays["optimizer/" + k] = v
        entries = []
        blobs = []
        offset = 0
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            b = a.tobytes()
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
            blobs.append(b)
            offset += len(b)
        header = {
            "model_config": self.config.to_dict(),
            "arrays": entries,
            "dtype": "<f8",
            "head": {"kind": self.head.kind, "meta": head_meta(self.head)},
            "optimizer": None if self.optimizer is None else self.optimizer.hyper(),
            "step": int(self.step),
            "seed": int(self.seed),
            "binning": None if self.binning is None else self.binning.to_dict(),
            "binning_fingerprint": self.binning_fingerprint,
            "vocabulary": {"size": VOCAB_SIZE, "mask": MASK_TOKEN, "pad": PAD_TOKEN},
            "meta": self.meta,
        }
        hb = canonical_json(header).encode("utf-8")
        return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(blobs)

    def save(self, path: PathLike) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise FormatVersionMismatch("checkpoint too short")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise FormatVersionMismatch("not a checkpoint file (bad magic)")
        if version != VERSION:
            raise ArtifactVersionMismatch(f"checkpoint format version {version}, expected {VERSION}")
        start = _PREFIX.size
        try:
            header = json.loads(data[start:start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatVersionMismatch(f"corrupt checkpoint header: {exc}") from None
        body = start + hlen
        arrays = {}
        for e in header["arrays"]:
            lo = body + e["offset"]
            if lo + e["nbytes"] > len(data):
                raise FormatVersionMismatch(f"checkpoint truncated inside array {e['name']}")
            arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=e["nbytes"] // 8,
                                              offset=lo).reshape(e["shape"]).copy()
        config = ModelConfig.from_dict(header["model_config"])
        dt = np.dtype(config.dtype)

        def group(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        params = {k: v.astype(dt) for k, v in group("encoder/").items()}
        head = make_head(header["head"]["kind"], group("head/"), **header["head"]["meta"])
        opt = None
        if header["optimizer"] is not None:
            opt = Adam.restore(header["optimizer"], group("optimizer/"))
        binning = None if header["binning"] is None else BinningTable.from_dict(header["binning"])
        return cls(config, params, head, binning, opt, header["step"], header["seed"],
                   header.get("meta", {}))

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
