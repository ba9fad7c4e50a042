import numpy as np
import pytest

from uninet.codec import PAD_TOKEN, derive_seed, encode_session
from uninet.heads import ClassifierHead, MfpHead
from uninet.model import ModelConfig, forward, init_params, pool_latent
from uninet.training import (Adam, LossLog, LrSchedule, Trainer, bucketed_batches, collate,
                             encode_pooled, remask)

SMALL = ModelConfig(max_len=200)


def make_examples(n=24, seed=0, eta=0.4):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        flows = [(rng.integers(0, 1039, 8), [rng.integers(0, 1039, 6) for _ in range(int(rng.integers(1, 5)))])
                 for _ in range(int(rng.integers(1, 4)))]
        out.append(encode_session(rng.integers(0, 1039, 8), flows, seq_len=200, mask_ratio=eta,
                                  seed=derive_seed(seed, i), sequence_label=i % 2))
    return out


def test_lr_schedule_points():
    s = LrSchedule()
    assert s(0) == pytest.approx(1e-4)
    assert s(5000) == pytest.approx(5.5e-4)
    assert s(10_000) == pytest.approx(1e-3)
    assert s(50_000) == pytest.approx(1e-3)


def test_adam_single_step_moves_by_lr():
    p = {"x": np.array([1.0, -1.0])}
    Adam().update(p, {"x": np.array([0.5, -2.0])}, 0.1)
    assert np.allclose(p["x"], [0.9, -0.9])


def test_adam_restore_continues_identically():
    a = Adam()
    p = {"x": np.ones(3)}
    for _ in range(3):
        a.update(p, {"x": p["x"] * 2}, 0.01)
    b = Adam.restore(a.hyper(), a.arrays())
    q = {"x": p["x"].copy()}
    a.update(p, {"x": p["x"] * 2}, 0.01)
    b.update(q, {"x": q["x"] * 2}, 0.01)
    assert np.array_equal(p["x"], q["x"])


def test_collate_trims_shared_pad_run_exactly():
    exs = make_examples(6)
    b = collate(exs)
    assert b.tokens.shape[1] == max(e.n_tokens for e in exs)
    p = init_params(SMALL, 0)
    full = np.stack([e.input for e in exs]).astype(np.int64)
    seg = np.stack([e.segment_label for e in exs]).astype(np.int64)
    z_full = pool_latent(forward(p, SMALL, full, seg), full != PAD_TOKEN)
    z_trim = pool_latent(forward(p, SMALL, b.tokens, b.segments, b.key_mask), b.key_mask)
    assert np.max(np.abs(z_full - z_trim)) < 1e-12


def test_remask_counts():
    b = collate(make_examples(5, eta=0.0))
    r = remask(b, 0.4, np.random.default_rng(0))
    n = b.key_mask.sum(1)
    assert r.mask_index.sum(1).tolist() == [int(np.floor(0.4 * k + 1e-9)) for k in n]
    assert np.all(r.tokens[r.mask_index == 1] == 1040)
    assert np.array_equal(np.where(r.mask_index == 1, r.true_value, r.tokens), b.tokens)


def test_bucketed_batches_cover_all_indices():
    lengths = np.random.default_rng(0).integers(1, 100, 77)
    batches = bucketed_batches(lengths, 8, np.random.default_rng(1))
    assert sorted(np.concatenate(batches).tolist()) == list(range(77))
    assert all(len(b) <= 8 for b in batches)


def _train(seed, steps=5, head="mfp"):
    params = init_params(SMALL, seed)
    h = MfpHead.init(10, 1042, seed) if head == "mfp" else ClassifierHead.init(10, 2, seed)
    tr = Trainer(SMALL, params, h)
    tr.fit(make_examples(), steps=steps, batch_size=8, seed=seed)
    return tr


def test_two_runs_same_seed_identical():
    a, b = _train(3), _train(3)
    assert a.log.text() == b.log.text()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_mfp_training_reduces_loss():
    tr = _train(0, steps=150)
    losses = tr.log.losses()
    assert losses[-20:].mean() < losses[:20].mean()


def test_classifier_training_runs_and_logs():
    tr = _train(1, steps=10, head="classifier")
    assert len(tr.log.rows) == 10
    assert tr.log.text().splitlines()[0] == "step\tlr\tloss"


def test_frozen_encoder_is_not_updated():
    params = init_params(SMALL, 0)
    before = {k: v.copy() for k, v in params.items()}
    tr = Trainer(SMALL, params, ClassifierHead.init(10, 2), train_encoder=False)
    tr.fit(make_examples(), steps=3, batch_size=8)
    assert all(np.array_equal(before[k], params[k]) for k in params)


def test_encode_pooled_preserves_order():
    exs = make_examples(9)
    p = init_params(SMALL, 2)
    z = encode_pooled(p, SMALL, exs, batch_size=4)
    one = encode_pooled(p, SMALL, [exs[5]])
    assert np.allclose(z[5], one[0], atol=1e-12)


def test_loss_log_save(tmp_path):
    log = LossLog()
    log.add(0, 1e-4, 2.5)
    log.save(tmp_path / "l.tsv")
    assert (tmp_path / "l.tsv").read_text() == "step\tlr\tloss\n0\t0.0001\t2.5\n"
