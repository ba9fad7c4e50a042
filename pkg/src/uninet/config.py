"""Pipeline configuration: one nested key/value tree with documented defaults.

Files may be YAML or JSON.  ``--set a.b=value`` overrides parse ``value`` as
YAML, so numbers, booleans, lists and mappings work on the command line.
Unknown keys are rejected so typos surface as :class:`ConfigInvalid`.
"""

from __future__ import annotations

import copy
import os
from typing import Any, Dict, Iterable, Optional, Union

import yaml

from ._io import stable_hash
from .errors import ConfigInvalid

PathLike = Union[str, os.PathLike]

# ``None`` marks keys whose value may be null or of any type
DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "io": {"input": None, "output": None, "labels": None, "codec": None, "checkpoint": None,
           "pcap": None},
    "synth": {"n_sessions": 200, "class_mix": {"benign": 1.0}},
    "capture": {"internal_cidrs": ["10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16"]},
    "flow": {"silence_timeout": 60.0},
    "session": {"mode": "static", "seconds": 900.0, "key_side": "src"},
    "codec": {
        "level": "session",          # session | flow | session_packets
        "n_bins": 1039,
        "mask_ratio": 0.4,
        "seq_len": 2000,
        "segment_scheme": "granularity",
        "packets_per_flow_cap": 10,
        "clean_lower_q": 0.0,
        "clean_upper_q": 0.999,
    },
    "model": {"vocab_size": 1042, "d_model": 10, "n_heads": 10, "n_layers": 2, "max_len": 2000,
              "ff_hidden": None, "n_segments": 3, "dtype": "float64", "emb_init_std": 0.1},
    "train": {
        "head": "mfp",               # mfp | classifier | ae
        "batch_size": 32,
        "steps": 2000,
        "lr_start": 1e-4,
        "lr_peak": 1e-3,
        "warmup_steps": 10000,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "remask": False,
        "train_encoder": True,
        "pool": "mean",
    },
    "head": {
        "delta": 0.95,
        "ae_bottleneck": None,
        "ae_final_relu": False,
        "ae_steps": 3000,
        "ae_lr": 1e-3,
        "n_classes": None,
        "classifier_hidden": None,
    },
    "tasks": {
        "task1": {"n_train_sessions": 1500, "n_test_sessions": 600,
                  "test_mix": {"benign": 0.6, "beacon": 0.2, "ddos": 0.2},
                  "mfp_steps": 2000, "probe_size": 64},
        "task2": {"n_train_flows": 2000, "n_test_flows": 1000,
                  "mix": {"benign": 0.5, "ddos": 0.25, "scan": 0.25},
                  "phase1_steps": 1500, "phase2_steps": 600, "phase2_cap": 500,
                  "cap_sweep": []},
        "task3": {"n_train_sessions": 600, "n_test_sessions": 300,
                  "mix": {"camera": 0.3, "speaker": 0.3, "hub": 0.2, "thermostat": 0.15,
                          "plug": 0.05},
                  "steps": 800, "warmup_steps": 300},
        "task4": {"n_monitored": 5, "n_unmonitored_train": 20, "n_unmonitored_test": 20,
                  "train_per_site": 60, "test_per_site": 30, "unmonitored_train_per_site": 6,
                  "unmonitored_test_per_site": 6, "steps": 1000, "warmup_steps": 300,
                  "fpr_targets": [0.01, 0.001]},
    },
    "bench": {"n_examples": 64, "repeats": 3},
}

_FREE_KEYS = {("synth", "class_mix"), ("tasks", "task1", "test_mix"), ("tasks", "task2", "mix"),
              ("tasks", "task3", "mix")}

_CHOICES = {
    ("session", "mode"): ("static", "inactivity"),
    ("session", "key_side"): ("src", "dst"),
    ("codec", "level"): ("session", "flow", "session_packets"),
    ("codec", "segment_scheme"): ("granularity", "flow_parity"),
    ("model", "dtype"): ("float64", "float32"),
    ("train", "head"): ("mfp", "classifier", "ae"),
    ("train", "pool"): ("mean", "first"),
}


def default_config() -> Dict[str, Any]:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path=()) -> None:
    for k, v in update.items():
        p = path + (k,)
        if p[:-1] in _FREE_KEYS:
            base[k] = v
            continue
        if k not in base:
            raise ConfigInvalid(".".join(p), "unknown key")
        if isinstance(base[k], dict) and p not in _FREE_KEYS:
            if not isinstance(v, dict):
                raise ConfigInvalid(".".join(p), "expected a mapping")
            _merge(base[k], v, p)
        else:
            base[k] = v


def parse_override(text: str):
    if "=" not in text:
        raise ConfigInvalid(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigInvalid(text, "empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigInvalid(key, f"cannot parse value: {exc}") from None
    return key, value


def set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigInvalid(".".join(parts[:i + 1]), "unknown key")
        node = node[part]
    leaf = parts[-1]
    free = tuple(parts[:-1]) in _FREE_KEYS
    if not isinstance(node, dict) or (leaf not in node and not free):
        raise ConfigInvalid(dotted, "unknown key")
    if isinstance(node.get(leaf), dict) and tuple(parts) not in _FREE_KEYS:
        if not isinstance(value, dict):
            raise ConfigInvalid(dotted, "expected a mapping")
        _merge(node[leaf], value, tuple(parts))
    else:
        node[leaf] = value


def get_path(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def load_config(path: Optional[PathLike] = None, overrides: Iterable[str] = (),
                seed: Optional[int] = None) -> Dict[str, Any]:
    """Defaults, then the file at ``path``, then ``overrides``, then ``seed``; validated."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigInvalid("--config", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigInvalid("--config", f"not valid YAML/JSON: {exc}") from None
        if data is not None:
            if not isinstance(data, dict):
                raise ConfigInvalid("<root>", "config file must hold a mapping")
            _merge(cfg, data)
    for text in overrides:
        key, value = parse_override(text)
        set_path(cfg, key, value)
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def _num(cfg, dotted, lo=None, hi=None, integer=False, lo_open=False):
    v = get_path(cfg, dotted)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(dotted, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigInvalid(dotted, f"expected an integer, got {v!r}")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigInvalid(dotted, f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
    if hi is not None and v > hi:
        raise ConfigInvalid(dotted, f"must be <= {hi}, got {v!r}")


def validate(cfg: Dict[str, Any]) -> None:
    for path, choices in _CHOICES.items():
        dotted = ".".join(path)
        if get_path(cfg, dotted) not in choices:
            raise ConfigInvalid(dotted, f"must be one of {list(choices)}, got {get_path(cfg, dotted)!r}")
    _num(cfg, "seed", 0, integer=True)
    _num(cfg, "flow.silence_timeout", 0, lo_open=True)
    _num(cfg, "session.seconds", 0, lo_open=True)
    _num(cfg, "codec.mask_ratio", 0.0, 1.0)
    _num(cfg, "codec.seq_len", 1, integer=True)
    _num(cfg, "codec.n_bins", 1, 1039, integer=True)
    _num(cfg, "codec.clean_lower_q", 0.0, 1.0)
    _num(cfg, "codec.clean_upper_q", 0.0, 1.0)
    if cfg["codec"]["clean_lower_q"] >= cfg["codec"]["clean_upper_q"]:
        raise ConfigInvalid("codec.clean_lower_q", "must be below codec.clean_upper_q")
    if cfg["codec"]["packets_per_flow_cap"] is not None:
        _num(cfg, "codec.packets_per_flow_cap", 0, integer=True)
    for k in ("d_model", "n_heads", "n_layers", "max_len"):
        _num(cfg, f"model.{k}", 1, integer=True)
    if cfg["model"]["d_model"] % cfg["model"]["n_heads"]:
        raise ConfigInvalid("model.n_heads", "must divide model.d_model")
    if cfg["codec"]["seq_len"] > cfg["model"]["max_len"]:
        raise ConfigInvalid("codec.seq_len", "exceeds model.max_len")
    _num(cfg, "train.batch_size", 1, integer=True)
    _num(cfg, "train.steps", 0, integer=True)
    _num(cfg, "train.lr_start", 0, lo_open=True)
    _num(cfg, "train.lr_peak", 0, lo_open=True)
    _num(cfg, "train.warmup_steps", 0, integer=True)
    _num(cfg, "head.delta", 0.0, 1.0)
    _num(cfg, "head.ae_steps", 0, integer=True)
    if cfg["head"]["ae_bottleneck"] is not None:
        _num(cfg, "head.ae_bottleneck", 1, cfg["model"]["d_model"], integer=True)
    if cfg["head"]["n_classes"] is not None:
        _num(cfg, "head.n_classes", 2, integer=True)
    for path in _FREE_KEYS:
        dotted = ".".join(path)
        mix = get_path(cfg, dotted)
        if not isinstance(mix, dict) or not mix:
            raise ConfigInvalid(dotted, "expected a non-empty mapping of class weights")
        for name, w in mix.items():
            if isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0:
                raise ConfigInvalid(f"{dotted}.{name}", f"weight must be a non-negative number, got {w!r}")
    _num(cfg, "tasks.task2.phase2_cap", 1, integer=True)
    for task in ("task3", "task4"):
        _num(cfg, f"tasks.{task}.warmup_steps", 0, integer=True)
    for t in cfg["tasks"]["task4"]["fpr_targets"]:
        if not isinstance(t, (int, float)) or not 0 < t <= 1:
            raise ConfigInvalid("tasks.task4.fpr_targets", f"targets must lie in (0, 1], got {t!r}")


def config_hash(cfg: Dict[str, Any]) -> str:
    """Hash of everything except the ``io`` section, so moving files keeps the hash."""
    return stable_hash({k: v for k, v in cfg.items() if k != "io"})


def dump_config(cfg: Dict[str, Any]) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
