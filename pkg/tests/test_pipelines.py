import json

import pytest

from uninet.cli import main
from uninet.config import load_config
from uninet.errors import ConfigInvalid
from uninet.pipelines import TASKS, run_pipeline

SMALL = ["codec.seq_len=96", "model.max_len=96", "train.batch_size=8", "head.ae_steps=20",
         "tasks.task1.n_train_sessions=40", "tasks.task1.n_test_sessions=30",
         "tasks.task1.mfp_steps=3", "tasks.task1.probe_size=8",
         "tasks.task2.n_train_flows=80", "tasks.task2.n_test_flows=40",
         "tasks.task2.phase1_steps=3", "tasks.task2.phase2_steps=2", "tasks.task2.phase2_cap=20",
         "tasks.task3.n_train_sessions=40", "tasks.task3.n_test_sessions=25", "tasks.task3.steps=3",
         "tasks.task4.train_per_site=4", "tasks.task4.test_per_site=3",
         "tasks.task4.unmonitored_train_per_site=1", "tasks.task4.unmonitored_test_per_site=1",
         "tasks.task4.n_unmonitored_train=4", "tasks.task4.n_unmonitored_test=4",
         "tasks.task4.steps=3"]


@pytest.mark.parametrize("task", TASKS)
def test_small_pipeline_writes_report(task, tmp_path):
    report = run_pipeline(task, load_config(None, SMALL), tmp_path)
    assert report["task"] == task
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["task"] == task and saved["config_hash"] == report["config_hash"]
    assert any(p.suffix == ".ckpt" for p in tmp_path.iterdir())


def test_task_reports_carry_headline_numbers(tmp_path):
    r1 = run_pipeline("task1-anomaly", load_config(None, SMALL), tmp_path / "1")
    assert {"probe_loss_step0", "probe_loss_final", "ratio"} <= set(r1["mfp"])
    assert 0.0 <= r1["test"]["auc"] <= 1.0
    r2 = run_pipeline("task2-attack", load_config(None, SMALL), tmp_path / "2")
    assert {"accuracy", "fpr"} <= set(r2["phase1"]["binary"])
    assert (r2["n_train"], r2["n_test"]) == (80, 40)


def test_task3_rejects_unknown_device(tmp_path):
    cfg = load_config(None, SMALL + ["tasks.task3.mix={camera: 1, toaster: 1}"])
    with pytest.raises(ConfigInvalid):
        run_pipeline("task3-device", cfg, tmp_path)


def test_task_warmup_override_is_validated():
    assert load_config()["tasks"]["task3"]["warmup_steps"] == 300
    with pytest.raises(ConfigInvalid) as ei:
        load_config(None, ["tasks.task4.warmup_steps=-1"])
    assert ei.value.field == "tasks.task4.warmup_steps"


def test_cli_pipeline(tmp_path, capsys):
    argv = ["pipeline", "task3-device", "--output", str(tmp_path)]
    for s in SMALL:
        argv += ["--set", s]
    assert main(argv) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["task"] == "task3-device" and out["report"].endswith("report.json")
