"""Output heads on top of the encoder latents.

* :class:`MfpHead`: masked feature prediction, a linear projection to
  vocabulary log-probabilities at masked positions.
* :class:`AeHead`: a small autoencoder on pooled latents whose reconstruction
  error is the anomaly score, with a percentile threshold fitted on benign data.
* :class:`ClassifierHead`: two-layer MLP with softmax output.

Every head keeps its parameters in a flat dict and exposes ``forward`` (which
returns a cache) and ``backward`` (which returns the latent gradient and the
parameter gradients), so the trainer treats them like the encoder.
"""

from __future__ import annotations

import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import NoMaskedPositions

Params = Dict[str, np.ndarray]

HEAD_MFP = "mfp"
HEAD_AE = "ae"
HEAD_CLASSIFIER = "classifier"


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _relu_backward(dout, out):
    return dout * (out > 0)


# -- masked feature prediction ----------------------------------------------

class MfpHead:
    """Projection ``[d x V]`` plus bias, applied to masked positions only."""

    kind = HEAD_MFP

    def __init__(self, params: Params):
        self.params = params

    @classmethod
    def init(cls, d_model: int, vocab_size: int, seed: int = 0, std: Optional[float] = None):
        rng = np.random.default_rng(seed)
        std = 1.0 / math.sqrt(d_model) if std is None else std
        return cls({"w": rng.normal(0.0, std, size=(d_model, vocab_size)),
                    "b": np.zeros(vocab_size)})

    def log_probs(self, latent: np.ndarray) -> np.ndarray:
        return log_softmax(latent @ self.params["w"] + self.params["b"])

    def forward(self, latent: np.ndarray, mask_index: np.ndarray, true_value: np.ndarray):
        """Mean negative log-likelihood of ``true_value`` over masked positions."""
        mask = np.asarray(mask_index) == 1
        if not mask.any():
            raise NoMaskedPositions("example has no masked positions")
        z = latent[mask]
        target = np.asarray(true_value)[mask].astype(np.int64)
        logp = self.log_probs(z)
        loss = float(-logp[np.arange(target.size), target].mean())
        return loss, (mask, z, target, logp, latent.shape)

    def backward(self, cache) -> Tuple[np.ndarray, Params]:
        mask, z, target, logp, shape = cache
        m = target.size
        dlogits = np.exp(logp)
        dlogits[np.arange(m), target] -= 1.0
        dlogits /= m
        grads = {"w": z.T @ dlogits, "b": dlogits.sum(0)}
        dlatent = np.zeros(shape, dtype=z.dtype)
        dlatent[mask] = dlogits @ self.params["w"].T
        return dlatent, grads


def mfp_loss(head: MfpHead, latent: np.ndarray, mask_index, true_value) -> float:
    return head.forward(latent, mask_index, true_value)[0]


# -- autoencoder ------------------------------------------------------------

class AeHead:
    """Two ReLU layers down to a bottleneck, two ReLU layers back up.

    ``h = ReLU(z W1 + b1)``, ``c = ReLU(h W2 + b2)``, then the mirrored
    decoder ``g = ReLU(c W3 + b3)``, ``z_hat = act(g W4 + b4)`` where ``act``
    is ReLU unless ``final_relu`` is False.
    """

    kind = HEAD_AE
    _LAYERS = ("1", "2", "3", "4")

    def __init__(self, params: Params, final_relu: bool = True, threshold: Optional[float] = None,
                 delta: float = 0.95):
        self.params = params
        self.final_relu = final_relu
        self.threshold = threshold
        self.delta = delta

    @classmethod
    def init(cls, d_model: int, bottleneck: Optional[int] = None, seed: int = 0,
             final_relu: bool = True, delta: float = 0.95):
        rng = np.random.default_rng(seed)
        k = d_model if bottleneck is None else bottleneck
        widths = [(d_model, d_model), (d_model, k), (k, d_model), (d_model, d_model)]
        p = {}
        for name, (i, o) in zip(cls._LAYERS, widths):
            p["w" + name] = _dense(rng, i, o)
            p["b" + name] = np.zeros(o)
        return cls(p, final_relu=final_relu, delta=delta)

    @classmethod
    def identity(cls, d_model: int):
        """All four layers the identity map; reconstructs any nonnegative ``z`` exactly."""
        p = {}
        for name in cls._LAYERS:
            p["w" + name] = np.eye(d_model)
            p["b" + name] = np.zeros(d_model)
        return cls(p)

    @property
    def bottleneck(self) -> int:
        return int(self.params["w2"].shape[1])

    def reconstruct(self, z: np.ndarray):
        acts = [np.asarray(z)]
        for i, name in enumerate(self._LAYERS):
            y = acts[-1] @ self.params["w" + name] + self.params["b" + name]
            if i < 3 or self.final_relu:
                y = np.maximum(y, 0.0)
            acts.append(y)
        return acts[-1], acts

    def scores(self, z: np.ndarray) -> np.ndarray:
        """Per-vector reconstruction MSE (mean over the ``d`` components)."""
        zh, _ = self.reconstruct(z)
        return ((np.asarray(z) - zh) ** 2).mean(-1)

    def forward(self, z: np.ndarray):
        """Batch mean of per-vector MSE."""
        z = np.atleast_2d(z)
        zh, acts = self.reconstruct(z)
        diff = zh - z
        return float((diff ** 2).mean()), (z, acts, diff)

    def backward(self, cache) -> Tuple[np.ndarray, Params]:
        z, acts, diff = cache
        n, d = z.shape
        dy = 2.0 * diff / (n * d)
        dz_direct = -dy
        grads: Params = {}
        for i in reversed(range(4)):
            name = self._LAYERS[i]
            if i < 3 or self.final_relu:
                dy = _relu_backward(dy, acts[i + 1])
            grads["w" + name] = acts[i].T @ dy
            grads["b" + name] = dy.sum(0)
            dy = dy @ self.params["w" + name].T
        return dy + dz_direct, {k: grads[k] for k in self.params}

    def is_anomalous(self, scores) -> np.ndarray:
        if self.threshold is None:
            raise ValueError("threshold not fitted")
        return np.asarray(scores) > self.threshold


def ae_score(head: AeHead, z: np.ndarray):
    s = head.scores(z)
    return float(s) if np.ndim(s) == 0 else s


def fit_threshold(benign_scores: Sequence[float], delta: float = 0.95) -> float:
    """Empirical ``delta``-quantile of benign scores, linear interpolation."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    s = np.asarray(benign_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no benign scores to fit a threshold on")
    return float(np.quantile(s, delta, method="linear"))


def classify_anomaly(scores, threshold: float) -> np.ndarray:
    return np.asarray(scores) > threshold


# -- classifier -------------------------------------------------------------

class ClassifierHead:
    """``softmax(ReLU(z W1 + b1) W2 + b2)``."""

    kind = HEAD_CLASSIFIER

    def __init__(self, params: Params):
        self.params = params

    @classmethod
    def init(cls, d_model: int, n_classes: int, seed: int = 0, hidden: Optional[int] = None):
        if n_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        rng = np.random.default_rng(seed)
        h = d_model if hidden is None else hidden
        return cls({"w1": _dense(rng, d_model, h), "b1": np.zeros(h),
                    "w2": _dense(rng, h, n_classes), "b2": np.zeros(n_classes)})

    @property
    def n_classes(self) -> int:
        return int(self.params["w2"].shape[1])

    def logits(self, z: np.ndarray):
        h = np.maximum(np.asarray(z) @ self.params["w1"] + self.params["b1"], 0.0)
        return h @ self.params["w2"] + self.params["b2"], h

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        return softmax(self.logits(z)[0])

    def forward(self, z: np.ndarray, labels):
        z = np.atleast_2d(z)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        logits, h = self.logits(z)
        logp = log_softmax(logits)
        loss = float(-logp[np.arange(labels.size), labels].mean())
        return loss, (z, h, logp, labels)

    def backward(self, cache) -> Tuple[np.ndarray, Params]:
        z, h, logp, labels = cache
        n = labels.size
        dlogits = np.exp(logp)
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        grads = {"w2": h.T @ dlogits, "b2": dlogits.sum(0)}
        dh = _relu_backward(dlogits @ self.params["w2"].T, h)
        grads["w1"] = z.T @ dh
        grads["b1"] = dh.sum(0)
        return dh @ self.params["w1"].T, {k: grads[k] for k in self.params}


def classify(head: ClassifierHead, z: np.ndarray):
    """Class probabilities and argmax labels (ties go to the lowest index)."""
    p = head.predict_proba(z)
    return p, np.argmax(p, axis=-1)


def ce_loss(probs, true_class) -> float:
    """Mean ``-log p[true]`` over a batch (or a single probability vector)."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.asarray(true_class, dtype=np.int64).reshape(-1)
    picked = p[np.arange(y.size), y]
    with np.errstate(divide="ignore"):
        return float(-np.log(picked).mean())


def make_head(kind: str, params: Params, **meta):
    if kind == HEAD_MFP:
        return MfpHead(params)
    if kind == HEAD_AE:
        return AeHead(params, final_relu=meta.get("final_relu", True),
                      threshold=meta.get("threshold"), delta=meta.get("delta", 0.95))
    if kind == HEAD_CLASSIFIER:
        return ClassifierHead(params)
    raise ValueError(f"unknown head kind {kind!r}")


def head_meta(head) -> dict:
    if isinstance(head, AeHead):
        return {"final_relu": head.final_relu, "threshold": head.threshold, "delta": head.delta}
    return {}
