"""Optimizer, learning-rate schedule, batching and training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ._io import atomic_write_text
from .codec import MASK_TOKEN, PAD_TOKEN, EncodedExample
from .heads import AeHead, ClassifierHead, MfpHead
from .model import (POOL_MEAN_NONPAD, ModelConfig, Params, backward, forward, pool_backward,
                    pool_latent)

logger = logging.getLogger(__name__)

ENC = "encoder."
HEAD = "head."


# -- schedule and optimizer -------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from ``start`` to ``peak`` over ``warmup_steps``, then constant."""

    start: float = 1e-4
    peak: float = 1e-3
    warmup_steps: int = 10_000

    def __call__(self, step: int) -> float:
        if self.warmup_steps <= 0 or step >= self.warmup_steps:
            return self.peak
        return self.start + (self.peak - self.start) * step / self.warmup_steps

    def to_dict(self) -> dict:
        return {"start": self.start, "peak": self.peak, "warmup_steps": self.warmup_steps}


class Adam:
    """Adaptive-moment updates with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def hyper(self) -> dict:
        return {"name": "adam", "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t}

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for k in sorted(self.m):
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    @classmethod
    def restore(cls, hyper: dict, arrays: Dict[str, np.ndarray]) -> "Adam":
        opt = cls(hyper["beta1"], hyper["beta2"], hyper["eps"])
        opt.t = int(hyper["t"])
        for k, a in arrays.items():
            kind, name = k.split(".", 1)
            (opt.m if kind == "m" else opt.v)[name] = np.array(a)
        return opt


# -- batching ---------------------------------------------------------------

class Batch(NamedTuple):
    tokens: np.ndarray
    segments: np.ndarray
    key_mask: np.ndarray
    mask_index: np.ndarray
    true_value: np.ndarray
    labels: np.ndarray


def collate(examples: Sequence[EncodedExample]) -> Batch:
    """Stack examples, trimming the shared trailing PAD run (exact, see model docs)."""
    L = max(1, max(ex.n_tokens for ex in examples))
    tok = np.stack([ex.input[:L] for ex in examples]).astype(np.int64)
    seg = np.stack([ex.segment_label[:L] for ex in examples]).astype(np.int64)
    mi = np.stack([ex.mask_index[:L] for ex in examples]).astype(np.int64)
    tv = np.stack([ex.true_value[:L] for ex in examples]).astype(np.int64)
    labels = np.array([ex.sequence_label for ex in examples], dtype=np.int64)
    return Batch(tok, seg, tok != PAD_TOKEN, mi, tv, labels)


def remask(batch: Batch, ratio: float, rng: np.random.Generator) -> Batch:
    """Fresh random masks: ``floor(ratio * n)`` non-PAD positions per row."""
    plain = np.where(batch.mask_index == 1, batch.true_value, batch.tokens)
    tok = plain.copy()
    mi = np.zeros_like(plain)
    tv = np.zeros_like(plain)
    for r in range(plain.shape[0]):
        idx = np.flatnonzero(batch.key_mask[r])
        k = int(math.floor(ratio * idx.size + 1e-9))
        if k:
            pos = np.sort(rng.choice(idx, size=k, replace=False))
            tv[r, pos] = plain[r, pos]
            tok[r, pos] = MASK_TOKEN
            mi[r, pos] = 1
    return batch._replace(tokens=tok, mask_index=mi, true_value=tv)


def bucketed_batches(lengths: Sequence[int], batch_size: int,
                     rng: Optional[np.random.Generator] = None,
                     bucket_factor: int = 50) -> List[np.ndarray]:
    """Index batches of similar length.

    With ``rng`` the order is shuffled, then sorted by length inside pools
    of ``batch_size * bucket_factor`` and the batch order shuffled again.
    Without ``rng`` the indices are processed in order.
    """
    n = len(lengths)
    if n == 0:
        return []
    lengths = np.asarray(lengths)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    pool = batch_size * bucket_factor
    batches = []
    for s in range(0, n, pool):
        chunk = order[s:s + pool]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, chunk.size, batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def batch_stream(examples: Sequence[EncodedExample], batch_size: int, rng: np.random.Generator):
    """Endless shuffled, length-bucketed batches (reshuffled every epoch)."""
    lengths = [ex.n_tokens for ex in examples]
    while True:
        for idx in bucketed_batches(lengths, batch_size, rng):
            yield [examples[i] for i in idx]


# -- trainer ----------------------------------------------------------------

@dataclass
class LossLog:
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    def add(self, step: int, lr: float, loss: float):
        self.rows.append((step, lr, loss))

    def text(self) -> str:
        lines = ["step\tlr\tloss"]
        lines.extend(f"{s}\t{lr:.9g}\t{loss:.9g}" for s, lr, loss in self.rows)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.text())

    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])


class Trainer:
    """Joint encoder + head optimisation for the MFP and classifier heads."""

    def __init__(self, config: ModelConfig, params: Params, head, optimizer: Optional[Adam] = None,
                 schedule: LrSchedule = LrSchedule(), train_encoder: bool = True,
                 pool: str = POOL_MEAN_NONPAD, step: int = 0):
        if not isinstance(head, (MfpHead, ClassifierHead)):
            raise TypeError("Trainer drives MFP and classifier heads; fit AE heads with fit_autoencoder")
        self.config = config
        self.params = params
        self.head = head
        self.optimizer = optimizer or Adam()
        self.schedule = schedule
        self.train_encoder = train_encoder
        self.pool = pool
        self.step_count = step
        self.log = LossLog()

    def loss_and_grads(self, batch: Batch):
        if self.train_encoder:
            latent, tr = forward(self.params, self.config, batch.tokens, batch.segments,
                                 batch.key_mask, trace=True)
        else:
            latent = forward(self.params, self.config, batch.tokens, batch.segments, batch.key_mask)
        if isinstance(self.head, MfpHead):
            loss, cache = self.head.forward(latent, batch.mask_index, batch.true_value)
            dlatent, hgrads = self.head.backward(cache)
        else:
            pooled = pool_latent(latent, batch.key_mask, self.pool)
            loss, cache = self.head.forward(pooled, batch.labels)
            dpooled, hgrads = self.head.backward(cache)
            dlatent = pool_backward(dpooled, batch.key_mask, latent.shape[1], self.pool)
        grads = {HEAD + k: g for k, g in hgrads.items()}
        if self.train_encoder:
            grads.update({ENC + k: g for k, g in backward(self.params, self.config, tr, dlatent).items()})
        return loss, grads

    def all_params(self) -> Dict[str, np.ndarray]:
        out = {HEAD + k: v for k, v in self.head.params.items()}
        if self.train_encoder:
            out.update({ENC + k: v for k, v in self.params.items()})
        return out

    def step(self, batch: Batch) -> float:
        lr = self.schedule(self.step_count)
        loss, grads = self.loss_and_grads(batch)
        if not math.isfinite(loss):
            from .errors import NaNDetected
            raise NaNDetected(f"non-finite loss {loss} at step {self.step_count}")
        self.optimizer.update(self.all_params(), grads, lr)
        self.log.add(self.step_count, lr, loss)
        self.step_count += 1
        return loss

    def fit(self, examples: Sequence[EncodedExample], steps: int, batch_size: int = 32,
            seed: int = 0, remask_ratio: Optional[float] = None,
            callback: Optional[Callable[["Trainer"], None]] = None) -> LossLog:
        rng = np.random.default_rng(seed)
        mask_rng = np.random.default_rng([seed, 1])
        stream = batch_stream(examples, batch_size, rng)
        for _ in range(steps):
            batch = collate(next(stream))
            if remask_ratio is not None:
                batch = remask(batch, remask_ratio, mask_rng)
            self.step(batch)
            if callback is not None:
                callback(self)
        return self.log


# -- inference helpers -------------------------------------------------------

def encode_pooled(params: Params, config: ModelConfig, examples: Sequence[EncodedExample],
                  pool: str = POOL_MEAN_NONPAD, batch_size: int = 64) -> np.ndarray:
    """Pooled latents ``[N, d]`` in input order (examples are unmasked first)."""
    out = np.zeros((len(examples), config.d_model))
    lengths = [ex.n_tokens for ex in examples]
    for idx in bucketed_batches(lengths, batch_size):
        b = collate([examples[i] for i in idx])
        plain = np.where(b.mask_index == 1, b.true_value, b.tokens)
        latent = forward(params, config, plain, b.segments, b.key_mask)
        out[idx] = pool_latent(latent, b.key_mask, pool)
    return out


def mfp_eval_loss(params: Params, config: ModelConfig, head: MfpHead,
                  examples: Sequence[EncodedExample], batch_size: int = 64) -> float:
    """Mean masked-token NLL over all masked positions of ``examples``."""
    total, count = 0.0, 0
    for idx in bucketed_batches([ex.n_tokens for ex in examples], batch_size):
        b = collate([examples[i] for i in idx])
        latent = forward(params, config, b.tokens, b.segments, b.key_mask)
        m = int(b.mask_index.sum())
        if m:
            total += head.forward(latent, b.mask_index, b.true_value)[0] * m
            count += m
    if count == 0:
        from .errors import NoMaskedPositions
        raise NoMaskedPositions("no masked positions in evaluation set")
    return total / count


def predict_proba(params: Params, config: ModelConfig, head: ClassifierHead,
                  examples: Sequence[EncodedExample], pool: str = POOL_MEAN_NONPAD) -> np.ndarray:
    return head.predict_proba(encode_pooled(params, config, examples, pool))


def fit_autoencoder(head: AeHead, latents: np.ndarray, steps: int, batch_size: int = 32,
                    seed: int = 0, schedule: LrSchedule = LrSchedule(),
                    optimizer: Optional[Adam] = None) -> LossLog:
    """Train the AE head on fixed latent vectors (the encoder stays frozen)."""
    latents = np.asarray(latents)
    rng = np.random.default_rng(seed)
    opt = optimizer or Adam()
    log = LossLog()
    n = latents.shape[0]
    order = rng.permutation(n)
    pos = 0
    for step in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        loss, cache = head.forward(latents[idx])
        _, grads = head.backward(cache)
        lr = schedule(step)
        opt.update(head.params, grads, lr)
        log.add(step, lr, loss)
    return log
