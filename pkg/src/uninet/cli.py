"""``uninet`` command-line front end.

Usage::

    uninet <command> [--config PATH] [--set key=value ...] [--seed N] [command options]

Every command prints a JSON summary on stdout.  Failures print a JSON object
``{"error", "message", "exit_code", ...}`` on stderr and exit with 1 (usage or
config), 2 (data) or 3 (numeric failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Dict, Optional, Sequence

import numpy as np

from . import synth
from ._io import atomic_write_text
from .capture import InternalNetwork, load_capture, write_pcap, write_records
from .checkpoint import Checkpoint
from .codec import BinningTable, Tokenizer, deserialize_examples, serialize_examples
from .config import config_hash, load_config
from .dataset import (encode_flows, encode_sessions, fit_tokenizer, lr_schedule, model_config,
                      read_sessions, sessions_from_records, write_sessions)
from .errors import ConfigInvalid, UninetError, UsageError
from .heads import AeHead, ClassifierHead, MfpHead, fit_threshold
from .metrics import ConfusionMatrix, binary_metrics, jsonable, roc_auc, tpr_at_fpr
from .model import forward, init_params, param_count
from .pipelines import PIPELINES, _class_report, sub_seed, write_json
from .training import (Adam, LrSchedule, Trainer, encode_pooled, fit_autoencoder,
                       mfp_eval_loss, predict_proba)

logger = logging.getLogger("uninet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable, dotted keys)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uninet", description="Network traffic tokenization and attention models")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_, *opts):
        p = sub.add_parser(name, help=help_)
        _common(p)
        for o in opts:
            p.add_argument(f"--{o}")
        return p

    cmd("synth", "generate labeled synthetic traffic", "output", "labels", "pcap")
    cmd("ingest", "read pcap or interchange records, write interchange records", "input", "output")
    cmd("assemble", "group records into flows and sessions", "input", "output")
    cmd("fit-codec", "fit the binning table on sessions", "input", "output")
    cmd("encode", "encode sessions or flows as five-key examples", "input", "output", "codec",
        "labels")
    cmd("train", "train a head (and the encoder) on encoded examples", "input", "output",
        "checkpoint")
    cmd("eval", "metrics report for a checkpoint on labeled examples", "input", "output",
        "checkpoint", "roc")
    cmd("score", "per-example scores and verdicts", "input", "output", "checkpoint")
    p = cmd("pipeline", "run a full task pipeline on synthetic traffic", "output")
    p.add_argument("task", choices=sorted(PIPELINES))
    cmd("bench", "inference latency micro-benchmark (hardware dependent)", "checkpoint")
    return parser


def _io(args, cfg, name, required=True):
    value = getattr(args, name, None) or cfg["io"].get(name)
    if required and not value:
        raise ConfigInvalid(f"io.{name}", f"--{name} (or io.{name}) is required")
    return value


def _ensure_parent(path) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)


def _emit(obj) -> None:
    print(json.dumps(jsonable(obj), sort_keys=True))


# -- commands ---------------------------------------------------------------

def cmd_synth(args, cfg):
    out = _io(args, cfg, "output")
    spec = synth.ScenarioSpec(cfg["seed"], cfg["synth"]["n_sessions"], cfg["synth"]["class_mix"])
    cap = synth.generate(spec)
    _ensure_parent(out)
    labels = _io(args, cfg, "labels", required=False) or os.fspath(out) + ".labels.csv"
    cap.write(out, labels)
    pcap = _io(args, cfg, "pcap", required=False)
    if pcap:
        write_pcap(cap.records, pcap)
    return {"records": len(cap.records), "sessions": len(cap.labels), "output": out,
            "labels": labels, "pcap": pcap}


def cmd_ingest(args, cfg):
    src, out = _io(args, cfg, "input"), _io(args, cfg, "output")
    recs = load_capture(src, InternalNetwork(cfg["capture"]["internal_cidrs"]))
    _ensure_parent(out)
    write_records(recs, out)
    return {"records": len(recs), "output": out}


def cmd_assemble(args, cfg):
    src, out = _io(args, cfg, "input"), _io(args, cfg, "output")
    recs = load_capture(src, InternalNetwork(cfg["capture"]["internal_cidrs"]))
    sessions = sessions_from_records(recs, cfg)
    _ensure_parent(out)
    write_sessions(sessions, out, {"config_hash": config_hash(cfg)})
    return {"records": len(recs), "sessions": len(sessions),
            "flows": sum(len(s.flows) for s in sessions), "output": out}


def cmd_fit_codec(args, cfg):
    src, out = _io(args, cfg, "input"), _io(args, cfg, "output")
    sessions, _ = read_sessions(src)
    if cfg["codec"]["level"] == "flow":
        tok = fit_tokenizer([], cfg, flows=[f for s in sessions for f in s.flows])
    else:
        tok = fit_tokenizer(sessions, cfg)
    _ensure_parent(out)
    tok.table.save(out)
    return {"features": len(tok.table.features), "fingerprint": tok.table.fingerprint(),
            "output": out}


def cmd_encode(args, cfg):
    src, out = _io(args, cfg, "input"), _io(args, cfg, "output")
    table = BinningTable.load(_io(args, cfg, "codec"))
    tok = Tokenizer(table)
    sessions, _ = read_sessions(src)
    labels_path = _io(args, cfg, "labels", required=False)
    by_ip = synth.read_labels(labels_path) if labels_path else {}
    classes = sorted(set(by_ip.values()))
    if "benign" in classes:
        classes.remove("benign")
        classes.insert(0, "benign")
    index = {c: i for i, c in enumerate(classes)}
    level = cfg["codec"]["level"]
    if level == "flow":
        flows = [(f, s.endpoint) for s in sessions for f in s.flows]
        labels = [index.get(by_ip.get(ep), 0) for _, ep in flows]
        examples = encode_flows([f for f, _ in flows], tok, cfg, labels, seed=cfg["seed"])
    else:
        labels = [index.get(by_ip.get(s.endpoint), 0) for s in sessions]
        examples = encode_sessions(sessions, tok, cfg, labels, seed=cfg["seed"])
    _ensure_parent(out)
    serialize_examples(examples, out, {"binning": table.fingerprint(),
                                       "config_hash": config_hash(cfg), "level": level,
                                       "class_names": classes})
    return {"examples": len(examples), "level": level, "class_names": classes, "output": out}


def _load_examples(path):
    examples, header = deserialize_examples(path, with_header=True)
    if not examples:
        raise UninetError(f"{path} holds no examples")
    return examples, header


def cmd_train(args, cfg):
    src, out = _io(args, cfg, "input"), _io(args, cfg, "output")
    examples, header = _load_examples(src)
    t = cfg["train"]
    seed = cfg["seed"]
    init = _io(args, cfg, "checkpoint", required=False)
    base = Checkpoint.load(init) if init else None
    if base is not None:
        base.check_binning(header.get("binning"))
        mcfg, params = base.config, base.params
    else:
        mcfg = model_config(cfg)
        params = init_params(mcfg, sub_seed(seed, 0))
    binning = base.binning if base is not None else None
    if binning is None and cfg["io"].get("codec"):
        binning = BinningTable.load(cfg["io"]["codec"])
    if binning is not None and header.get("binning") not in (None, binning.fingerprint()):
        from .errors import ArtifactVersionMismatch
        raise ArtifactVersionMismatch("examples and codec were fitted on different binning tables")
    meta = {"config_hash": config_hash(cfg), "class_names": header.get("class_names", []),
            "examples_binning": header.get("binning")}
    _ensure_parent(out)
    opt = Adam(t["beta1"], t["beta2"], t["eps"])
    if t["head"] == "ae":
        if base is None:
            raise ConfigInvalid("io.checkpoint", "AE training needs a pretrained encoder checkpoint")
        h = cfg["head"]
        benign = [e for e in examples if e.sequence_label == 0]
        z = encode_pooled(params, mcfg, benign, t["pool"])
        head = AeHead.init(mcfg.d_model, h["ae_bottleneck"], seed=sub_seed(seed, 1),
                           final_relu=h["ae_final_relu"], delta=h["delta"])
        log = fit_autoencoder(head, z, h["ae_steps"], t["batch_size"], seed=sub_seed(seed, 2),
                              schedule=LrSchedule(h["ae_lr"], h["ae_lr"], 0), optimizer=opt)
        head.threshold = fit_threshold(head.scores(z), h["delta"])
        ck = Checkpoint(mcfg, params, head, binning, opt, base.step, seed, meta)
        steps = h["ae_steps"]
    else:
        if t["head"] == "mfp":
            head = MfpHead.init(mcfg.d_model, mcfg.vocab_size, seed=sub_seed(seed, 1))
        else:
            n = cfg["head"]["n_classes"] or max(len(header.get("class_names", [])),
                                                max(e.sequence_label for e in examples) + 1, 2)
            head = ClassifierHead.init(mcfg.d_model, n, seed=sub_seed(seed, 1),
                                       hidden=cfg["head"]["classifier_hidden"])
        tr = Trainer(mcfg, params, head, opt, lr_schedule(cfg), train_encoder=t["train_encoder"],
                     pool=t["pool"])
        tr.fit(examples, t["steps"], t["batch_size"], seed=sub_seed(seed, 2),
               remask_ratio=cfg["codec"]["mask_ratio"] if t["remask"] else None)
        log = tr.log
        ck = Checkpoint(mcfg, tr.params, head, binning, opt, tr.step_count, seed, meta)
        steps = t["steps"]
    ck.save(out)
    log_path = os.fspath(out) + ".loss.tsv"
    log.save(log_path)
    losses = log.losses()
    return {"head": t["head"], "steps": steps, "output": out, "loss_log": log_path,
            "loss_first": float(losses[0]) if losses.size else None,
            "loss_last": float(losses[-1]) if losses.size else None}


def _checkpoint_for(args, cfg, header):
    ck = Checkpoint.load(_io(args, cfg, "checkpoint"))
    ck.check_binning(header.get("binning"))
    expected = ck.meta.get("examples_binning")
    if expected and header.get("binning") and expected != header["binning"]:
        from .errors import ArtifactVersionMismatch
        raise ArtifactVersionMismatch(
            f"examples use binning {header['binning']}, checkpoint was trained on {expected}")
    return ck


def _scores(ck, examples, pool):
    if isinstance(ck.head, AeHead):
        return ck.head.scores(encode_pooled(ck.params, ck.config, examples, pool)), None
    if isinstance(ck.head, ClassifierHead):
        p = predict_proba(ck.params, ck.config, ck.head, examples, pool)
        return p, p.argmax(1)
    raise UsageError("scoring needs an AE or classifier checkpoint")


def cmd_eval(args, cfg):
    src, out = _io(args, cfg, "input"), _io(args, cfg, "output")
    examples, header = _load_examples(src)
    ck = _checkpoint_for(args, cfg, header)
    y = np.array([e.sequence_label for e in examples])
    report: Dict[str, object] = {"head": ck.head.kind, "n": len(examples),
                                 "config_hash": config_hash(cfg)}
    curve = None
    if isinstance(ck.head, MfpHead):
        report["mfp_loss"] = mfp_eval_loss(ck.params, ck.config, ck.head, examples)
    else:
        scores, pred = _scores(ck, examples, cfg["train"]["pool"])
        if isinstance(ck.head, AeHead):
            truth = (y != 0).astype(int)
            pred = (scores > ck.head.threshold).astype(int)
            positive = scores
        else:
            truth = y
            positive = scores[:, 1] if scores.shape[1] == 2 else None
        if ck.head.kind == "ae" or scores.shape[1] == 2:
            truth_b = (truth != 0).astype(int)
            pred_b = (np.asarray(pred) != 0).astype(int)
            cm = ConfusionMatrix.from_predictions(truth_b, pred_b)
            report["binary"] = binary_metrics(cm)
            report["confusion"] = cm.to_dict()
            if 0 < truth_b.sum() < truth_b.size:
                curve, report["auc"] = roc_auc(positive, truth_b)
                report["tpr_at_fpr"] = {str(t): tpr_at_fpr(curve, t) for t in (0.001, 0.01)}
        else:
            names = header.get("class_names") or [str(i) for i in range(scores.shape[1])]
            names = list(names) + [str(i) for i in range(len(names), scores.shape[1])]
            report["multiclass"] = _class_report(truth.tolist(), pred.tolist(), names)
    _ensure_parent(out)
    write_json(out, report)
    if curve is not None:
        roc = getattr(args, "roc", None) or os.path.splitext(os.fspath(out))[0] + ".roc.csv"
        atomic_write_text(roc, curve.table())
        report["roc"] = roc
    return report


def cmd_score(args, cfg):
    src, out = _io(args, cfg, "input"), _io(args, cfg, "output")
    examples, header = _load_examples(src)
    ck = _checkpoint_for(args, cfg, header)
    scores, pred = _scores(ck, examples, cfg["train"]["pool"])
    lines = []
    if isinstance(ck.head, AeHead):
        lines.append("index\tscore\tanomalous")
        for i, s in enumerate(scores):
            lines.append(f"{i}\t{s:.12g}\t{int(s > ck.head.threshold)}")
    else:
        names = ck.meta.get("class_names") or []
        lines.append("index\tlabel\tprob\tclass")
        for i, (p, k) in enumerate(zip(scores, pred)):
            name = names[k] if k < len(names) else str(k)
            lines.append(f"{i}\t{int(k)}\t{p[k]:.12g}\t{name}")
    _ensure_parent(out)
    atomic_write_text(out, "\n".join(lines) + "\n")
    return {"examples": len(examples), "output": out}


def cmd_pipeline(args, cfg):
    out = _io(args, cfg, "output")
    report = PIPELINES[args.task](cfg, out)
    return {"task": args.task, "output": out, "report": os.path.join(out, "report.json"),
            "summary": {k: v for k, v in report.items() if not isinstance(v, dict)}}


def cmd_bench(args, cfg):
    path = _io(args, cfg, "checkpoint", required=False)
    if path:
        ck = Checkpoint.load(path)
        mcfg, params = ck.config, ck.params
    else:
        mcfg = model_config(cfg)
        params = init_params(mcfg, cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    n = cfg["bench"]["n_examples"]
    L = min(68, mcfg.max_len)
    tokens = rng.integers(0, min(1040, mcfg.vocab_size), size=(n, L))
    segs = np.zeros_like(tokens)
    forward(params, mcfg, tokens[:1], segs[:1])
    best = float("inf")
    for _ in range(cfg["bench"]["repeats"]):
        t0 = time.perf_counter()
        for i in range(n):
            forward(params, mcfg, tokens[i:i + 1], segs[i:i + 1])
        best = min(best, (time.perf_counter() - t0) / n)
    return {"mean_latency_us_per_example": best * 1e6, "sequence_length": L,
            "parameters": param_count(params), "hardware_dependent": True,
            "note": "single-example forward pass on this machine; not comparable across hardware"}


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "assemble": cmd_assemble,
    "fit-codec": cmd_fit_codec, "encode": cmd_encode, "train": cmd_train, "eval": cmd_eval,
    "score": cmd_score, "pipeline": cmd_pipeline, "bench": cmd_bench,
}


def _error_payload(exc: BaseException, code: int) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("field", "line_no"):
        if hasattr(exc, attr):
            payload[attr] = getattr(exc, attr)
    return payload


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.overrides, args.seed)
        _emit(COMMANDS[args.command](args, cfg))
        return 0
    except UninetError as exc:
        err, code = exc, exc.exit_code
    except FloatingPointError as exc:
        err, code = exc, 3
    except (OSError, ValueError, KeyError) as exc:
        err, code = exc, 2
    print(json.dumps(_error_payload(err, code), sort_keys=True, default=str), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
