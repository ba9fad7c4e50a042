"""T-Attent: a small post-LN transformer encoder in numpy with manual backprop.

Shapes use ``B`` (batch), ``L`` (sequence length), ``d`` (model width),
``H`` (heads).  Parameters live in a flat ``dict[str, ndarray]`` so the
optimizer, checkpoint writer and gradient checker can treat them uniformly.

PAD handling: positions whose ``key_mask`` is False are excluded as attention
keys.  Their own rows are still computed (and ignored by pooling), which is
why trimming a trailing PAD run before the forward pass is exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .errors import NaNDetected, SegmentOutOfRange, TokenOutOfRange

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

POOL_MEAN_NONPAD = "mean"
POOL_FIRST = "first"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1042
    d_model: int = 10
    n_heads: int = 10
    n_layers: int = 2
    max_len: int = 2000
    ff_hidden: Optional[int] = None
    n_segments: int = 3
    pad_token: int = 1041
    dtype: str = "float64"
    emb_init_std: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def hidden(self) -> int:
        return self.ff_hidden if self.ff_hidden is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Random initial parameters; deterministic in ``seed``."""
    if config.head_dim == 1:
        logger.warning("head_dim is 1 (d_model=%d, n_heads=%d); each head attends on a scalar",
                       config.d_model, config.n_heads)
    rng = np.random.default_rng(seed)
    d, hid = config.d_model, config.hidden
    dt = np.dtype(config.dtype)
    std = config.emb_init_std

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    p: Params = {
        "tok_emb": rng.normal(0.0, std, size=(config.vocab_size, d)),
        "seg_emb": rng.normal(0.0, std, size=(config.n_segments, d)),
        "pos_emb": rng.normal(0.0, std, size=(config.max_len, d)),
    }
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            p[pre + "w" + proj] = dense(d, d)
            p[pre + "b" + proj] = np.zeros(d)
        p[pre + "ln1_g"] = np.ones(d)
        p[pre + "ln1_b"] = np.zeros(d)
        p[pre + "ff_w1"] = dense(d, hid)
        p[pre + "ff_b1"] = np.zeros(hid)
        p[pre + "ff_w2"] = dense(hid, d)
        p[pre + "ff_b2"] = np.zeros(d)
        p[pre + "ln2_g"] = np.ones(d)
        p[pre + "ln2_b"] = np.zeros(d)
    return {k: v.astype(dt) for k, v in p.items()}


def param_count(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def key_mask_from_tokens(tokens: np.ndarray, pad_token: int) -> np.ndarray:
    return np.asarray(tokens) != pad_token


# -- elementwise pieces -----------------------------------------------------

def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, H):
    B, L, d = x.shape
    return x.reshape(B, L, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def _sum_rows(x):
    return x.reshape(-1, x.shape[-1]).sum(0)


def _matmul_w(x, dy):
    """Gradient of ``x @ W`` w.r.t. ``W`` for batched ``x``."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


class ForwardTrace:
    """Intermediate activations kept by :func:`forward` for :func:`backward`."""

    def __init__(self, tokens, segments, key_mask):
        self.tokens = tokens
        self.segments = segments
        self.key_mask = key_mask
        self.layers = []
        self.attention = []


# -- forward / backward -----------------------------------------------------

def embed(params: Params, config: ModelConfig, tokens, segments) -> np.ndarray:
    """Token + segment + positional embedding sum, shape ``[B, L, d]``.

    Accepts a single sequence (1-D) as well; the result then has no batch axis.
    """
    tokens = np.asarray(tokens)
    segments = np.asarray(segments)
    single = tokens.ndim == 1
    if single:
        tokens, segments = tokens[None], segments[None]
    if tokens.shape != segments.shape:
        raise ValueError(f"tokens {tokens.shape} and segments {segments.shape} differ in shape")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise TokenOutOfRange(f"token ids must lie in [0, {config.vocab_size})")
    if segments.size and (segments.min() < 0 or segments.max() >= config.n_segments):
        raise SegmentOutOfRange(f"segment labels must lie in [0, {config.n_segments})")
    L = tokens.shape[1]
    if L > config.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {config.max_len}")
    x = params["tok_emb"][tokens] + params["seg_emb"][segments] + params["pos_emb"][:L]
    return x[0] if single else x


def _check_finite(x, where):
    if not np.isfinite(x).all():
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NaNDetected(f"{bad} non-finite activations at {where}")


def forward(params: Params, config: ModelConfig, tokens, segments, key_mask=None,
            trace: bool = False):
    """Run the encoder.  Returns ``latent`` or ``(latent, ForwardTrace)``."""
    tokens = np.asarray(tokens)
    segments = np.asarray(segments)
    single = tokens.ndim == 1
    if single:
        tokens, segments = tokens[None], segments[None]
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    if key_mask is None:
        key_mask = key_mask_from_tokens(tokens, config.pad_token)
    key_mask = np.asarray(key_mask, dtype=bool)

    tr = ForwardTrace(tokens, segments, key_mask)
    x = embed(params, config, tokens, segments)
    bias = np.where(key_mask, 0.0, -np.inf).astype(x.dtype)[:, None, None, :]
    H = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)

    for i in range(config.n_layers):
        pre = f"layers.{i}."
        q = x @ params[pre + "wq"] + params[pre + "bq"]
        k = x @ params[pre + "wk"] + params[pre + "bk"]
        v = x @ params[pre + "wv"] + params[pre + "bv"]
        qh, kh, vh = _split_heads(q, H), _split_heads(k, H), _split_heads(v, H)
        a = qh @ kh.transpose(0, 1, 3, 2)
        a *= scale
        a += bias
        a -= a.max(-1, keepdims=True)
        np.exp(a, out=a)
        a /= a.sum(-1, keepdims=True)
        ctx = _merge_heads(a @ vh)
        r1 = x + ctx @ params[pre + "wo"] + params[pre + "bo"]
        h1, ln1 = _layernorm(r1, params[pre + "ln1_g"], params[pre + "ln1_b"])
        u = h1 @ params[pre + "ff_w1"] + params[pre + "ff_b1"]
        gu, t = _gelu(u)
        r2 = h1 + gu @ params[pre + "ff_w2"] + params[pre + "ff_b2"]
        h2, ln2 = _layernorm(r2, params[pre + "ln2_g"], params[pre + "ln2_b"])
        _check_finite(h2, f"layer {i}")
        if trace:
            tr.layers.append(dict(x=x, qh=qh, kh=kh, vh=vh, a=a, ctx=ctx, h1=h1, ln1=ln1,
                                  u=u, t=t, gu=gu, ln2=ln2))
            tr.attention.append(a)
        x = h2

    out = x[0] if single else x
    if trace:
        return out, tr
    return out


def attention_weights(params: Params, config: ModelConfig, tokens, segments, key_mask=None):
    """Per-layer attention probabilities ``[B, H, L, L]`` (diagnostics, tests)."""
    _, tr = forward(params, config, tokens, segments, key_mask, trace=True)
    return tr.attention


def backward(params: Params, config: ModelConfig, tr: ForwardTrace, dlatent) -> Params:
    """Reverse-mode gradients of a scalar loss given ``dloss/dlatent``."""
    dx = np.asarray(dlatent)
    if dx.ndim == 2:
        dx = dx[None]
    H = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    grads: Params = {}

    for i in reversed(range(config.n_layers)):
        pre = f"layers.{i}."
        c = tr.layers[i]
        dr2, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layernorm_backward(
            dx, params[pre + "ln2_g"], c["ln2"])
        grads[pre + "ff_w2"] = _matmul_w(c["gu"], dr2)
        grads[pre + "ff_b2"] = _sum_rows(dr2)
        du = (dr2 @ params[pre + "ff_w2"].T) * _gelu_grad(c["u"], c["t"])
        grads[pre + "ff_w1"] = _matmul_w(c["h1"], du)
        grads[pre + "ff_b1"] = _sum_rows(du)
        dh1 = dr2 + du @ params[pre + "ff_w1"].T
        dr1, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layernorm_backward(
            dh1, params[pre + "ln1_g"], c["ln1"])

        grads[pre + "wo"] = _matmul_w(c["ctx"], dr1)
        grads[pre + "bo"] = _sum_rows(dr1)
        dctx = _split_heads(dr1 @ params[pre + "wo"].T, H)
        a = c["a"]
        dvh = a.transpose(0, 1, 3, 2) @ dctx
        ds = dctx @ c["vh"].transpose(0, 1, 3, 2)
        ds -= np.einsum("bhij,bhij->bhi", ds, a)[..., None]
        ds *= a
        ds *= scale
        dqh = ds @ c["kh"]
        dkh = ds.transpose(0, 1, 3, 2) @ c["qh"]

        x = c["x"]
        dxi = dr1
        for name, dh in (("q", dqh), ("k", dkh), ("v", dvh)):
            dproj = _merge_heads(dh)
            grads[pre + "w" + name] = _matmul_w(x, dproj)
            grads[pre + "b" + name] = _sum_rows(dproj)
            dxi = dxi + dproj @ params[pre + "w" + name].T
        dx = dxi

    B, L, d = dx.shape
    g_tok = np.zeros_like(params["tok_emb"])
    np.add.at(g_tok, tr.tokens.reshape(-1), dx.reshape(-1, d))
    g_seg = np.zeros_like(params["seg_emb"])
    np.add.at(g_seg, tr.segments.reshape(-1), dx.reshape(-1, d))
    g_pos = np.zeros_like(params["pos_emb"])
    g_pos[:L] = dx.sum(0)
    grads["tok_emb"], grads["seg_emb"], grads["pos_emb"] = g_tok, g_seg, g_pos
    return {k: grads[k] for k in params}


# -- pooling ----------------------------------------------------------------

def pool_latent(latent, key_mask, mode: str = POOL_MEAN_NONPAD) -> np.ndarray:
    """Collapse ``[B, L, d]`` (or ``[L, d]``) latents to one vector per sequence."""
    latent = np.asarray(latent)
    key_mask = np.asarray(key_mask, dtype=bool)
    single = latent.ndim == 2
    if single:
        latent, key_mask = latent[None], key_mask[None]
    if mode == POOL_FIRST:
        out = latent[:, 0, :]
    elif mode == POOL_MEAN_NONPAD:
        m = key_mask[..., None].astype(latent.dtype)
        out = (latent * m).sum(1) / np.maximum(m.sum(1), 1.0)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return out[0] if single else out


def pool_backward(dpooled, key_mask, L: int, mode: str = POOL_MEAN_NONPAD) -> np.ndarray:
    dpooled = np.asarray(dpooled)
    key_mask = np.asarray(key_mask, dtype=bool)
    B, d = dpooled.shape
    if mode == POOL_FIRST:
        out = np.zeros((B, L, d), dtype=dpooled.dtype)
        out[:, 0, :] = dpooled
        return out
    m = key_mask[..., None].astype(dpooled.dtype)
    return m * (dpooled / np.maximum(m.sum(1), 1.0))[:, None, :]
