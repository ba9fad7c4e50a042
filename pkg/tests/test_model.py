import numpy as np
import pytest

from uninet.errors import NaNDetected, SegmentOutOfRange, TokenOutOfRange
from uninet.model import (ModelConfig, attention_weights, backward, embed, forward,
                          init_params, param_count, pool_backward, pool_latent)

from tiny import TINY, encoder_gradient_errors, tiny_batch


def test_zero_tables_give_zero_activations():
    p = {k: np.zeros_like(v) for k, v in init_params(TINY).items()}
    assert not embed(p, TINY, np.arange(5), np.zeros(5, int)).any()


def test_one_hot_embedding_sum():
    cfg = ModelConfig(vocab_size=50, d_model=8, n_heads=2, max_len=32, pad_token=49)
    p = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    p["tok_emb"][7, 0] = 1
    p["seg_emb"][2, 1] = 1
    p["pos_emb"][0, 2] = 1
    row = embed(p, cfg, np.array([7]), np.array([2]))[0]
    assert row.tolist() == [1, 1, 1, 0, 0, 0, 0, 0]


def test_swapping_equal_tokens_changes_only_position_terms():
    p = init_params(TINY, 1)
    tokens = np.array([3, 9, 3, 4])
    seg = np.array([0, 1, 0, 2])
    a = embed(p, TINY, tokens, seg)
    b = embed(p, TINY, tokens[[2, 1, 0, 3]], seg[[2, 1, 0, 3]])
    assert np.array_equal(a, b)


def test_embed_range_errors():
    p = init_params(TINY)
    with pytest.raises(TokenOutOfRange):
        embed(p, TINY, np.array([50]), np.array([0]))
    with pytest.raises(SegmentOutOfRange):
        embed(p, TINY, np.array([1]), np.array([3]))


def test_attention_rows_sum_to_one_and_skip_pad():
    p = init_params(TINY, 2)
    tokens, segments, _, _ = tiny_batch(2)
    for a in attention_weights(p, TINY, tokens, segments):
        assert np.allclose(a.sum(-1), 1.0, atol=1e-9)
        assert not a[1, :, :, -9:].any()


def test_single_token_attends_to_itself():
    p = init_params(TINY, 3)
    for a in attention_weights(p, TINY, np.array([[5]]), np.array([[0]])):
        assert np.all(a == 1.0)


def test_forward_is_deterministic():
    tokens, segments, _, _ = tiny_batch(4)
    a = forward(init_params(TINY, 4), TINY, tokens, segments)
    b = forward(init_params(TINY, 4), TINY, tokens, segments)
    assert a.tobytes() == b.tobytes()


def test_pad_invariance_default_config():
    cfg = ModelConfig(max_len=400)
    p = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    tok = rng.integers(0, 1039, size=120)
    seg = rng.integers(0, 3, size=120)
    z1 = pool_latent(forward(p, cfg, tok, seg), tok != cfg.pad_token)
    tok2 = np.r_[tok, [cfg.pad_token] * 100]
    seg2 = np.r_[seg, [0] * 100]
    z2 = pool_latent(forward(p, cfg, tok2, seg2), tok2 != cfg.pad_token)
    assert np.max(np.abs(z1 - z2)) < 1e-9


def test_pooling():
    lat = np.array([[1.0, 2.0], [3.0, 6.0], [100.0, 100.0]])
    km = np.array([True, True, False])
    assert pool_latent(lat, km).tolist() == [2.0, 4.0]
    assert pool_latent(lat, km, "first").tolist() == [1.0, 2.0]
    assert pool_latent(lat, np.array([True, False, False])).tolist() == [1.0, 2.0]
    same = np.tile([[4.0, 5.0]], (3, 1))
    assert pool_latent(same, np.ones(3, bool)).tolist() == [4.0, 5.0]
    d = pool_backward(np.ones((1, 2)), km[None], 3)
    assert d[0, :, 0].tolist() == [0.5, 0.5, 0.0]


def test_gradients_match_finite_differences():
    worst = encoder_gradient_errors(0)
    assert max(worst.values()) < 1e-4, worst


def test_quadratic_and_zero_loss_gradients():
    # for loss = sum(latent**2) / 2 the latent gradient is the latent itself
    p = init_params(TINY, 5)
    tokens, segments, _, _ = tiny_batch(5)
    latent, tr = forward(p, TINY, tokens, segments, trace=True)
    g0 = backward(p, TINY, tr, np.zeros_like(latent))
    assert all(not v.any() for v in g0.values())
    g = backward(p, TINY, tr, latent)
    h = 1e-6
    p["layers.1.ln2_b"][0] += h
    up = (forward(p, TINY, tokens, segments) ** 2).sum() / 2
    p["layers.1.ln2_b"][0] -= 2 * h
    down = (forward(p, TINY, tokens, segments) ** 2).sum() / 2
    assert g["layers.1.ln2_b"][0] == pytest.approx((up - down) / (2 * h), rel=1e-6)


def test_nan_detection():
    p = init_params(TINY)
    p["tok_emb"][0, 0] = np.nan
    with pytest.raises(NaNDetected):
        forward(p, TINY, np.array([0, 1]), np.array([0, 0]))


def test_default_parameter_count():
    assert param_count(init_params(ModelConfig())) == 33110


def test_head_dim_one_warns(caplog):
    init_params(ModelConfig(max_len=10))
    assert "head_dim is 1" in caplog.text


def test_float32_option():
    cfg = ModelConfig(vocab_size=50, d_model=8, n_heads=2, max_len=32, pad_token=49, dtype="float32")
    p = init_params(cfg)
    assert forward(p, cfg, np.arange(4), np.zeros(4, int)).dtype == np.float32
