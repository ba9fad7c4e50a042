"""End-to-end pipelines on synthetic traffic.

``task1-anomaly``
    MFP pretraining on benign sessions, frozen encoder, autoencoder head,
    percentile threshold, evaluation on a mixed test set.
``task2-attack``
    Flow-level binary classifier (benign vs attack), then a multi-class
    classifier that names the attack type of every flow flagged by phase 1.
``task3-device``
    Session-level multi-class device classification with macro metrics and a
    report on the rarest class.
``task4-wfp``
    Website fingerprinting: closed-world multi-class over monitored sites and
    an open-world monitored-vs-unmonitored detector with TPR at fixed FPR.

Each pipeline writes checkpoints, loss logs, ``report.json`` and (where a
score exists) ``roc.csv`` into ``out_dir`` and returns the report dict.
Reports contain no timings, so reruns with the same config are byte-identical.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import synth
from ._io import atomic_write_text
from .checkpoint import Checkpoint
from .config import config_hash
from .dataset import (encode_flows, encode_sessions, fit_tokenizer, label_ids, lr_schedule,
                      model_config, sessions_from_records)
from .heads import AeHead, ClassifierHead, MfpHead, fit_threshold
from .metrics import (ConfusionMatrix, binary_metrics, jsonable, macro_metrics,
                      ovr_macro_auc, per_class_confusion, roc_auc, tpr_at_fpr)
from .model import init_params
from .training import (Adam, LrSchedule, Trainer, encode_pooled, fit_autoencoder,
                       mfp_eval_loss, predict_proba)

logger = logging.getLogger(__name__)

TASKS = ("task1-anomaly", "task2-attack", "task3-device", "task4-wfp")
BENIGN = "benign"


def sub_seed(seed: int, *tags: int) -> int:
    """Independent 32-bit seed for a named stage of a run."""
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(jsonable(obj), sort_keys=True, indent=2) + "\n")


def _synth_sessions(cfg, seed, n, mix, profiles=None, host_offset=0):
    cap = synth.generate(synth.ScenarioSpec(seed, n, dict(mix), dict(profiles or {}), host_offset))
    sessions = sessions_from_records(cap.records, cfg)
    return sessions, [cap.labels[s.endpoint] for s in sessions]


def _optimizer(cfg) -> Adam:
    t = cfg["train"]
    return Adam(t["beta1"], t["beta2"], t["eps"])


def _train_classifier(cfg, examples, n_classes, steps, seed, params=None) -> Trainer:
    mcfg = model_config(cfg)
    params = init_params(mcfg, sub_seed(seed, 0)) if params is None else copy.deepcopy(params)
    head = ClassifierHead.init(mcfg.d_model, n_classes, seed=sub_seed(seed, 1),
                               hidden=cfg["head"]["classifier_hidden"])
    tr = Trainer(mcfg, params, head, _optimizer(cfg), lr_schedule(cfg),
                 train_encoder=cfg["train"]["train_encoder"], pool=cfg["train"]["pool"])
    tr.fit(examples, steps, cfg["train"]["batch_size"], seed=sub_seed(seed, 2))
    return tr


def _with_warmup(cfg, steps):
    """Copy of ``cfg`` whose learning-rate warmup lasts ``steps`` steps.

    The supervised device and fingerprinting tasks train for under a thousand
    steps, far shorter than the pretraining warmup, so they carry their own.
    """
    out = copy.deepcopy(cfg)
    out["train"]["warmup_steps"] = steps
    return out


def _save_trainer(tr: Trainer, tokenizer, cfg, path, seed, **meta):
    meta = dict(meta, config_hash=config_hash(cfg))
    Checkpoint(tr.config, tr.params, tr.head, tokenizer.table, tr.optimizer, tr.step_count,
               seed, meta).save(path)


def _class_report(y_true, y_pred, classes) -> dict:
    cms = per_class_confusion(y_true, y_pred, len(classes))
    return {
        "accuracy": float(np.mean(np.asarray(y_true) == np.asarray(y_pred))),
        "macro": macro_metrics(cms),
        "per_class": {c: dict(binary_metrics(cm), support=cm.tp + cm.fn, confusion=cm.to_dict())
                      for c, cm in zip(classes, cms) if cm.total},
    }


def _confusion_table(y_true, y_pred, classes) -> Dict[str, Dict[str, int]]:
    table = {t: {p: 0 for p in classes} for t in classes}
    for t, p in zip(y_true, y_pred):
        table[classes[t]][classes[p]] += 1
    return table


# -- task 1 -----------------------------------------------------------------

def task1_anomaly(cfg: dict, out_dir) -> dict:
    t1 = cfg["tasks"]["task1"]
    seed = cfg["seed"]
    os.makedirs(out_dir, exist_ok=True)

    train_s, _ = _synth_sessions(cfg, sub_seed(seed, 1, 0), t1["n_train_sessions"], {BENIGN: 1.0})
    test_s, test_names = _synth_sessions(cfg, sub_seed(seed, 1, 1), t1["n_test_sessions"],
                                         t1["test_mix"])
    tok = fit_tokenizer(train_s, cfg)
    train_ex = encode_sessions(train_s, tok, cfg, seed=sub_seed(seed, 1, 2))

    mcfg = model_config(cfg)
    params = init_params(mcfg, sub_seed(seed, 1, 3))
    mfp = MfpHead.init(mcfg.d_model, mcfg.vocab_size, seed=sub_seed(seed, 1, 4))
    probe = train_ex[:t1["probe_size"]]
    loss0 = mfp_eval_loss(params, mcfg, mfp, probe)
    tr = Trainer(mcfg, params, mfp, _optimizer(cfg), lr_schedule(cfg),
                 pool=cfg["train"]["pool"])
    tr.fit(train_ex, t1["mfp_steps"], cfg["train"]["batch_size"], seed=sub_seed(seed, 1, 5),
           remask_ratio=cfg["codec"]["mask_ratio"] if cfg["train"]["remask"] else None)
    loss_end = mfp_eval_loss(params, mcfg, mfp, probe)
    tr.log.save(os.path.join(out_dir, "mfp_loss.tsv"))
    _save_trainer(tr, tok, cfg, os.path.join(out_dir, "mfp.ckpt"), seed, task="task1-anomaly",
                  stage="mfp")

    # phase 2: the MFP head is dropped, the encoder is frozen
    h = cfg["head"]
    z_train = encode_pooled(params, mcfg, train_ex, cfg["train"]["pool"])
    ae = AeHead.init(mcfg.d_model, h["ae_bottleneck"], seed=sub_seed(seed, 1, 6),
                     final_relu=h["ae_final_relu"], delta=h["delta"])
    ae_log = fit_autoencoder(ae, z_train, h["ae_steps"], cfg["train"]["batch_size"],
                             seed=sub_seed(seed, 1, 7), schedule=LrSchedule(h["ae_lr"], h["ae_lr"], 0))
    ae_log.save(os.path.join(out_dir, "ae_loss.tsv"))
    ae.threshold = fit_threshold(ae.scores(z_train), h["delta"])
    Checkpoint(mcfg, params, ae, tok.table, None, tr.step_count, seed,
               {"task": "task1-anomaly", "stage": "ae", "config_hash": config_hash(cfg)}
               ).save(os.path.join(out_dir, "ae.ckpt"))

    y = np.array([0 if n == BENIGN else 1 for n in test_names])
    test_ex = encode_sessions(test_s, tok, cfg, labels=y, mask_ratio=0.0)
    scores = ae.scores(encode_pooled(params, mcfg, test_ex, cfg["train"]["pool"]))
    curve, auc_value = roc_auc(scores, y)
    pred = (scores > ae.threshold).astype(int)
    cm = ConfusionMatrix.from_predictions(y, pred)
    detection = {}
    for name in sorted(set(test_names)):
        sel = np.array([n == name for n in test_names])
        detection[name] = float(pred[sel].mean())
    atomic_write_text(os.path.join(out_dir, "roc.csv"), curve.table())
    report = {
        "task": "task1-anomaly",
        "config_hash": config_hash(cfg),
        "seed": seed,
        "mfp": {"steps": tr.step_count, "probe_loss_step0": loss0, "probe_loss_final": loss_end,
                "ratio": loss_end / loss0, "train_loss_first": float(tr.log.rows[0][2]),
                "train_loss_last": float(tr.log.rows[-1][2])},
        "ae": {"delta": h["delta"], "threshold": ae.threshold, "final_relu": ae.final_relu,
               "bottleneck": ae.bottleneck},
        "test": {"n": int(y.size), "n_anomalous": int(y.sum()), "auc": auc_value,
                 "binary": binary_metrics(cm), "confusion": cm.to_dict(),
                 "flagged_fraction_by_class": detection,
                 "tpr_at_fpr": {str(t): tpr_at_fpr(curve, t) for t in (0.01, 0.05, 0.1)}},
    }
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


# -- task 2 -----------------------------------------------------------------

def _flow_pool(cfg, seed, name, needed, host_offset):
    """Flows of one synthetic class, generating more sessions until ``needed`` exist."""
    n = max(4, needed // 8)
    while True:
        sessions, _ = _synth_sessions(cfg, seed, n, {name: 1.0}, host_offset=host_offset)
        flows = [f for s in sessions for f in s.flows]
        if len(flows) >= needed:
            return flows
        n *= 2


def _quota(mix: Mapping[str, float], total: int) -> Dict[str, int]:
    names = list(mix)
    w = np.array([float(mix[k]) for k in names])
    q = w / w.sum() * total
    counts = np.floor(q).astype(int)
    for i in np.argsort(-(q - counts), kind="stable")[:total - counts.sum()]:
        counts[i] += 1
    return dict(zip(names, counts.tolist()))


def flow_dataset(cfg, seed, mix, total) -> Tuple[list, List[str]]:
    """``total`` flows stratified by ``mix``, shuffled; returns (flows, class names)."""
    rng = np.random.default_rng(sub_seed(seed, 99))
    flows, names = [], []
    for k, (name, count) in enumerate(sorted(_quota(mix, total).items())):
        if count == 0:
            continue
        pool = _flow_pool(cfg, sub_seed(seed, k), name, count, host_offset=k << 20)
        pick = rng.choice(len(pool), size=count, replace=False)
        flows.extend(pool[i] for i in sorted(pick))
        names.extend([name] * count)
    order = rng.permutation(len(flows))
    return [flows[i] for i in order], [names[i] for i in order]


def _cap_per_class(labels: Sequence[int], cap: int) -> List[int]:
    seen: Dict[int, int] = {}
    keep = []
    for i, y in enumerate(labels):
        if seen.get(y, 0) < cap:
            keep.append(i)
            seen[y] = seen.get(y, 0) + 1
    return keep


def task2_attack(cfg: dict, out_dir) -> dict:
    t2 = cfg["tasks"]["task2"]
    seed = cfg["seed"]
    os.makedirs(out_dir, exist_ok=True)
    train_f, train_n = flow_dataset(cfg, sub_seed(seed, 2, 0), t2["mix"], t2["n_train_flows"])
    test_f, test_n = flow_dataset(cfg, sub_seed(seed, 2, 1), t2["mix"], t2["n_test_flows"])
    tok = fit_tokenizer([], cfg, flows=train_f)

    y_train = [0 if n == BENIGN else 1 for n in train_n]
    y_test = np.array([0 if n == BENIGN else 1 for n in test_n])
    train_ex = encode_flows(train_f, tok, cfg, labels=y_train, mask_ratio=0.0)
    test_ex = encode_flows(test_f, tok, cfg, labels=y_test, mask_ratio=0.0)

    # phase 1: benign vs attack
    p1 = _train_classifier(cfg, train_ex, 2, t2["phase1_steps"], sub_seed(seed, 2, 2))
    p1.log.save(os.path.join(out_dir, "phase1_loss.tsv"))
    _save_trainer(p1, tok, cfg, os.path.join(out_dir, "phase1.ckpt"), seed, task="task2-attack",
                  stage="phase1", class_names=["benign", "attack"])
    prob = predict_proba(p1.params, p1.config, p1.head, test_ex, cfg["train"]["pool"])
    pred = prob.argmax(1)
    cm = ConfusionMatrix.from_predictions(y_test, pred)
    curve, auc_value = roc_auc(prob[:, 1], y_test)
    atomic_write_text(os.path.join(out_dir, "roc.csv"), curve.table())

    # phase 2: attack type of each flagged flow
    attacks = sorted(n for n in t2["mix"] if n != BENIGN)
    report_p2 = None
    sweep = {}
    if len(attacks) >= 2:
        att_idx = [i for i, n in enumerate(train_n) if n != BENIGN]
        att_labels = label_ids([train_n[i] for i in att_idx], attacks)

        def run_phase2(cap, tag):
            keep = _cap_per_class(att_labels, cap)
            ex = [dataclasses.replace(train_ex[att_idx[i]], sequence_label=att_labels[i])
                  for i in keep]
            return _train_classifier(cfg, ex, len(attacks), t2["phase2_steps"],
                                     sub_seed(seed, 2, 3, tag), params=p1.params)

        flagged = np.flatnonzero(pred == 1)
        classes = [BENIGN] + attacks
        true_full = label_ids(test_n, classes)

        def evaluate(p2):
            final = np.zeros(len(test_ex), dtype=int)
            if flagged.size:
                pr2 = predict_proba(p2.params, p2.config, p2.head, [test_ex[i] for i in flagged],
                                    cfg["train"]["pool"])
                final[flagged] = pr2.argmax(1) + 1
            return final

        p2 = run_phase2(t2["phase2_cap"], 0)
        p2.log.save(os.path.join(out_dir, "phase2_loss.tsv"))
        _save_trainer(p2, tok, cfg, os.path.join(out_dir, "phase2.ckpt"), seed,
                      task="task2-attack", stage="phase2", class_names=attacks)
        final = evaluate(p2)
        fl_true = [true_full[i] for i in flagged]
        fl_pred = [int(final[i]) for i in flagged]
        report_p2 = {
            "classes": attacks,
            "cap_per_class": t2["phase2_cap"],
            "n_flagged": int(flagged.size),
            "flagged": _class_report(fl_true, fl_pred, classes) if flagged.size else None,
            "end_to_end": _class_report(true_full, final.tolist(), classes),
            "confusion": _confusion_table(true_full, final.tolist(), classes),
        }
        for j, cap in enumerate(t2["cap_sweep"]):
            fs = evaluate(run_phase2(int(cap), j + 1))
            sweep[str(int(cap))] = _class_report(true_full, fs.tolist(), classes)["macro"]

    report = {
        "task": "task2-attack",
        "config_hash": config_hash(cfg),
        "seed": seed,
        "n_train": len(train_ex),
        "n_test": len(test_ex),
        "train_mix": {n: train_n.count(n) for n in sorted(set(train_n))},
        "phase1": {"steps": p1.step_count, "binary": binary_metrics(cm), "confusion": cm.to_dict(),
                   "auc": auc_value,
                   "tpr_at_fpr": {str(t): tpr_at_fpr(curve, t) for t in (0.001, 0.01)}},
        "phase2": report_p2,
        "phase2_cap_sweep": sweep,
    }
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


# -- task 3 -----------------------------------------------------------------

def task3_device(cfg: dict, out_dir) -> dict:
    t3 = cfg["tasks"]["task3"]
    seed = cfg["seed"]
    os.makedirs(out_dir, exist_ok=True)
    classes = sorted(t3["mix"])
    unknown = [c for c in classes if c not in synth.DEVICE_PROFILES]
    if unknown:
        from .errors import ConfigInvalid
        raise ConfigInvalid("tasks.task3.mix", f"no device profile for {unknown}")
    profiles = {c: synth.DEVICE_PROFILES[c] for c in classes}
    train_s, train_n = _synth_sessions(cfg, sub_seed(seed, 3, 0), t3["n_train_sessions"],
                                       t3["mix"], profiles)
    test_s, test_n = _synth_sessions(cfg, sub_seed(seed, 3, 1), t3["n_test_sessions"],
                                     t3["mix"], profiles)
    tok = fit_tokenizer(train_s, cfg)
    y_train = label_ids(train_n, classes)
    y_test = label_ids(test_n, classes)
    train_ex = encode_sessions(train_s, tok, cfg, labels=y_train, mask_ratio=0.0)
    test_ex = encode_sessions(test_s, tok, cfg, labels=y_test, mask_ratio=0.0)
    tr = _train_classifier(_with_warmup(cfg, t3["warmup_steps"]), train_ex, len(classes),
                           t3["steps"], sub_seed(seed, 3, 2))
    tr.log.save(os.path.join(out_dir, "loss.tsv"))
    _save_trainer(tr, tok, cfg, os.path.join(out_dir, "device.ckpt"), seed, task="task3-device",
                  class_names=classes)
    prob = predict_proba(tr.params, tr.config, tr.head, test_ex, cfg["train"]["pool"])
    pred = prob.argmax(1).tolist()
    rep = _class_report(y_test, pred, classes)
    counts = {c: train_n.count(c) for c in classes}
    minority = min(classes, key=lambda c: (counts[c], c))
    report = {
        "task": "task3-device",
        "config_hash": config_hash(cfg),
        "seed": seed,
        "classes": classes,
        "train_counts": counts,
        "test": rep,
        "ovr_macro_auc": ovr_macro_auc(prob, y_test),
        "confusion": _confusion_table(y_test, pred, classes),
        "minority_class": {"name": minority, "train_count": counts[minority],
                           "metrics": rep["per_class"].get(minority)},
    }
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


# -- task 4 -----------------------------------------------------------------

def task4_wfp(cfg: dict, out_dir) -> dict:
    t4 = cfg["tasks"]["task4"]
    seed = cfg["seed"]
    os.makedirs(out_dir, exist_ok=True)
    site_seed = sub_seed(seed, 4, 9)
    m, u_tr, u_te = t4["n_monitored"], t4["n_unmonitored_train"], t4["n_unmonitored_test"]
    monitored = [f"site{i}" for i in range(m)]
    unmon_train = [f"site{i}" for i in range(m, m + u_tr)]
    unmon_test = [f"site{i}" for i in range(m + u_tr, m + u_tr + u_te)]
    profiles = {f"site{i}": synth.site_profile(i, site_seed) for i in range(m + u_tr + u_te)}

    def sessions_for(sites, per_site, tag, offset):
        if not sites or per_site == 0:
            return [], []
        return _synth_sessions(cfg, sub_seed(seed, 4, tag), len(sites) * per_site,
                               {s: 1.0 for s in sites}, profiles, host_offset=offset)

    mon_tr = sessions_for(monitored, t4["train_per_site"], 0, 0)
    mon_te = sessions_for(monitored, t4["test_per_site"], 1, 1 << 20)
    un_tr = sessions_for(unmon_train, t4["unmonitored_train_per_site"], 2, 2 << 20)
    un_te = sessions_for(unmon_test, t4["unmonitored_test_per_site"], 3, 3 << 20)

    wcfg = _with_warmup(cfg, t4["warmup_steps"])
    wcfg["codec"]["level"] = "session_packets"
    tok = fit_tokenizer(mon_tr[0] + un_tr[0], wcfg)

    def enc(pair, labels):
        return encode_sessions(pair[0], tok, wcfg, labels=labels, mask_ratio=0.0)

    # closed world: monitored sites only
    y_cw_tr = label_ids(mon_tr[1], monitored)
    y_cw_te = label_ids(mon_te[1], monitored)
    cw = _train_classifier(wcfg, enc(mon_tr, y_cw_tr), m, t4["steps"], sub_seed(seed, 4, 4))
    cw.log.save(os.path.join(out_dir, "closed_world_loss.tsv"))
    _save_trainer(cw, tok, wcfg, os.path.join(out_dir, "closed_world.ckpt"), seed,
                  task="task4-wfp", stage="closed_world", class_names=monitored)
    cw_prob = predict_proba(cw.params, cw.config, cw.head, enc(mon_te, y_cw_te), cfg["train"]["pool"])
    closed = _class_report(y_cw_te, cw_prob.argmax(1).tolist(), monitored)

    # open world: monitored sites plus one "unmonitored" class
    ow_classes = monitored + ["unmonitored"]
    y_ow_tr = y_cw_tr + [m] * len(un_tr[0])
    ow_train_ex = enc(mon_tr, y_cw_tr) + enc(un_tr, [m] * len(un_tr[0]))
    ow = _train_classifier(wcfg, ow_train_ex, m + 1, t4["steps"], sub_seed(seed, 4, 5))
    ow.log.save(os.path.join(out_dir, "open_world_loss.tsv"))
    _save_trainer(ow, tok, wcfg, os.path.join(out_dir, "open_world.ckpt"), seed,
                  task="task4-wfp", stage="open_world", class_names=ow_classes)
    ow_test_ex = enc(mon_te, y_cw_te) + enc(un_te, [m] * len(un_te[0]))
    ow_prob = predict_proba(ow.params, ow.config, ow.head, ow_test_ex, cfg["train"]["pool"])
    # every monitored class counts as the positive category
    score = 1.0 - ow_prob[:, m]
    y_bin = np.array([1] * len(mon_te[0]) + [0] * len(un_te[0]))
    curve, auc_value = roc_auc(score, y_bin)
    atomic_write_text(os.path.join(out_dir, "roc.csv"), curve.table())
    cm = ConfusionMatrix.from_predictions(y_bin, (ow_prob.argmax(1) != m).astype(int))
    report = {
        "task": "task4-wfp",
        "config_hash": config_hash(cfg),
        "seed": seed,
        "monitored": monitored,
        "n_unmonitored_sites": {"train": u_tr, "test": u_te},
        "closed_world": closed,
        "open_world": {"auc": auc_value, "binary": binary_metrics(cm), "confusion": cm.to_dict(),
                       "tpr_at_fpr": {str(t): tpr_at_fpr(curve, t) for t in t4["fpr_targets"]},
                       "n_train": len(y_ow_tr), "n_test": int(y_bin.size)},
    }
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


PIPELINES = {
    "task1-anomaly": task1_anomaly,
    "task2-attack": task2_attack,
    "task3-device": task3_device,
    "task4-wfp": task4_wfp,
}


def run_pipeline(name: str, cfg: dict, out_dir) -> dict:
    try:
        fn = PIPELINES[name]
    except KeyError:
        from .errors import UsageError
        raise UsageError(f"unknown pipeline {name!r}; choose from {list(PIPELINES)}") from None
    return fn(cfg, out_dir)
