"""Distillation of the draft model from a frozen target.

Loss per head ``i`` (``t`` indexes positions, the target is read at ``t+1+i``)::

    cls_i = CE(p_target[t+1+i], draft_logits_i[t])
    reg_i = smooth_l1(h_target[t+1+i], rms_norm(draft_fc_i[t], target_final_norm))
    L     = sum_i (cls_i + w_reg * reg_i) * decay ** i

``h_target`` is already final-normed, so both sides of ``reg_i`` live in the
space fed to ``lm_head``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .speculator import Speculator
from .target import TargetModel
from .tensor import Graph, Tensor, rms_norm, smooth_l1, soft_cross_entropy, softmax

__all__ = [
    "TrainConfig",
    "DistillBatch",
    "AdamW",
    "LossRecord",
    "lr_at",
    "extract_teacher",
    "sample_mask",
    "distill_loss",
    "train_step",
    "train",
    "train_target",
    "sample_windows",
    "teacher_pool",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    w_reg: float = 10.0
    decay: float = 0.7
    num_heads: int = 5
    lr: float = 1e-3
    warmup: int = 1000
    min_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    steps: int = 20000
    batch_size: int = 16
    seq_len: int = 128
    smooth_l1_beta: float = 1.0
    sample_top_k: int | None = None
    sample_top_p: float | None = None
    seed: int = 0
    log_every: int = 100
    # precompute target signals once over fixed windows (the target is frozen)
    teacher_pool: bool = True

    @property
    def sample_mask_enabled(self) -> bool:
        return self.sample_top_k is not None or self.sample_top_p is not None

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr`` over ``warmup`` steps, then linear decay to ``min_lr`` at ``steps``."""
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min((step - cfg.warmup) / span, 1.0)
    return cfg.lr + (cfg.min_lr - cfg.lr) * frac


class AdamW:
    """Adam with decoupled weight decay over a dict of Tensors."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._tmp = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            m, v, u = self.m[k], self.v[k], self._tmp[k]
            # in place on per-parameter buffers; each stays cache resident
            if p.grad is not None:
                np.multiply(p.grad, p.grad, out=u)
                m *= c.beta1
                m += (1 - c.beta1) * p.grad
                v *= c.beta2
                u *= 1 - c.beta2
                v += u
            else:
                m *= c.beta1
                v *= c.beta2
            np.multiply(v, 1.0 / bc2, out=u)
            np.sqrt(u, out=u)
            u += c.adam_eps
            np.divide(m, u, out=u)
            u *= lr / bc1
            data = p.data * (1.0 - lr * c.weight_decay)
            data -= u
            p.data = data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class DistillBatch:
    tokens: np.ndarray  # [B, T]
    hidden: np.ndarray  # [B, T, d], target hidden after the final norm
    probs: np.ndarray  # [B, T, V], row t is the target's distribution of token t+1
    valid: np.ndarray  # [B, T] position mask

    @property
    def trainable_positions(self) -> int:
        # the first head needs tokens t+1 and teacher rows t+1
        return int(self.valid[:, 1:].sum()) if self.tokens.shape[1] > 1 else 0


def extract_teacher(target: TargetModel, sequences, max_len: int | None = None) -> Iterator[DistillBatch]:
    """One target forward per sequence (or batch of equal-length sequences).

    Sequences longer than ``max_len`` (default ``max_seq_len``) are split into
    consecutive chunks.
    """
    max_len = max_len or target.config.max_seq_len
    arr = np.asarray(sequences) if not isinstance(sequences, list) else None
    if arr is not None and arr.ndim == 2:
        groups = [arr]
    else:
        groups = [np.asarray(s, dtype=np.int64)[None] for s in sequences]
    for g in groups:
        for start in range(0, g.shape[1], max_len):
            chunk = g[:, start:start + max_len]
            logits, hidden = target.forward_batch(chunk)
            probs = softmax(Tensor(logits.data.astype(np.float64))).data
            yield DistillBatch(chunk, hidden.data, probs, np.ones(chunk.shape, dtype=bool))


def _top_set(p: np.ndarray, top_k: int | None, top_p: float | None) -> np.ndarray:
    """Boolean membership of each vocab entry in the top-k / top-p set (last axis)."""
    order = np.argsort(-p, axis=-1, kind="stable")
    ranked = np.take_along_axis(p, order, axis=-1)
    keep_ranked = np.ones_like(ranked, dtype=bool)
    if top_k is not None:
        keep_ranked[..., top_k:] = False
    if top_p is not None:
        before = np.cumsum(ranked, axis=-1) - ranked
        keep_ranked &= before < top_p
    keep = np.zeros_like(keep_ranked)
    np.put_along_axis(keep, order, keep_ranked, axis=-1)
    return keep


def sample_mask(teacher_probs: np.ndarray, tokens: np.ndarray, num_heads: int,
                top_k: int | None = None, top_p: float | None = None) -> np.ndarray:
    """Per-head position mask ``[num_heads, B, T-1]``.

    Position ``t`` of head ``i`` is kept iff every corpus token it consumes,
    ``t+1 .. t+1+i``, lies in the target's top-k/top-p set at the position
    before it. A masked head therefore masks all later heads. With both
    filters off the mask is all ones over each head's valid range.
    """
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    n = max(T - 1, 0)
    if top_k is None and top_p is None:
        ok = np.ones((B, n), dtype=bool)
    else:
        member = _top_set(teacher_probs[:, :n], top_k, top_p)
        ok = np.take_along_axis(member, tokens[:, 1:, None], axis=-1)[..., 0]
    out = np.zeros((num_heads, B, n), dtype=bool)
    run = np.ones((B, n), dtype=bool)
    for i in range(num_heads):
        m = n - i
        if m <= 0:
            break
        run = run[:, :m] & ok[:, i:i + m]
        out[i, :, :m] = run
    return out


def distill_loss(draft_hiddens, draft_logits, teacher: DistillBatch, norm_weight, cfg: TrainConfig,
                 masks: np.ndarray | None = None, eps: float = 1e-5):
    """Returns ``(loss Tensor, per-head list of (cls, reg) floats)``."""
    n = cfg.num_heads
    if len(draft_hiddens) != n or len(draft_logits) != n:
        raise ValueError(f"expected {n} heads, got {len(draft_hiddens)} hiddens / {len(draft_logits)} logits")
    T = teacher.tokens.shape[1]
    total = None
    parts = []
    for i in range(n):
        m = max(T - 1 - i, 0)
        p = teacher.probs[:, 1 + i:1 + i + m]
        h = teacher.hidden[:, 1 + i:1 + i + m]
        w = teacher.valid[:, 1 + i:1 + i + m].astype(p.dtype)
        if masks is not None:
            w = w * masks[i, :, :m]
        lg = draft_logits[i]
        dt = lg.dtype
        cls = soft_cross_entropy(p, lg, weight=w)
        hn = rms_norm(draft_hiddens[i], norm_weight, eps)
        reg = smooth_l1(Tensor(h.astype(dt)), hn, cfg.smooth_l1_beta, weight=w)
        term = (cls + reg * cfg.w_reg) * (cfg.decay ** i)
        total = term if total is None else total + term
        parts.append((float(cls.data), float(reg.data)))
    return total, parts


@dataclass
class LossRecord:
    step: int
    lr: float
    loss: float
    heads: list = field(default_factory=list)  # [(cls, reg), ...]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def train_step(spec: Speculator, batch: DistillBatch, opt: AdamW, step: int, cfg: TrainConfig) -> tuple[float, list]:
    """One teacher-forced distillation update; returns ``(loss, per-head parts)``."""
    for p in spec.weights.values():
        p.requires_grad = True
    masks = None
    if cfg.sample_mask_enabled:
        masks = sample_mask(batch.probs, batch.tokens, cfg.num_heads, cfg.sample_top_k, cfg.sample_top_p)
    opt.zero_grad()
    with Graph() as g:
        fcs, logits = spec.forward_train(batch.tokens, batch.hidden)
        loss, parts = distill_loss(fcs, logits, batch, spec.target.weights["final_norm"], cfg, masks,
                                   spec.target.config.rms_eps)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss at step {step}: heads={parts}")
    g.backward(loss)
    opt.step(lr_at(step, cfg))
    return value, parts


def sample_windows(corpus: np.ndarray, batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
    corpus = np.asarray(corpus, dtype=np.int64)
    if len(corpus) < length:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than seq_len {length}")
    starts = rng.integers(0, len(corpus) - length + 1, size=batch)
    return np.stack([corpus[s:s + length] for s in starts])


def teacher_pool(target: TargetModel, corpus: np.ndarray, seq_len: int, chunk: int = 64) -> DistillBatch:
    """Teacher signals for every non-overlapping ``seq_len`` window of ``corpus``."""
    corpus = np.asarray(corpus, dtype=np.int64)
    n = len(corpus) // seq_len
    if n == 0:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than seq_len {seq_len}")
    windows = corpus[: n * seq_len].reshape(n, seq_len)
    parts = [next(extract_teacher(target, windows[i:i + chunk])) for i in range(0, n, chunk)]
    return DistillBatch(
        windows,
        np.concatenate([b.hidden for b in parts]),
        np.concatenate([b.probs for b in parts]),
        np.ones(windows.shape, dtype=bool),
    )


def train(spec: Speculator, corpus: np.ndarray, cfg: TrainConfig, callback=None) -> list[LossRecord]:
    """Distill ``spec`` in place against its (frozen) target; returns the loss curve.

    ``callback(step, spec)`` runs every ``cfg.log_every`` steps, e.g. for eval.
    """
    if cfg.num_heads != spec.config.num_heads:
        raise ValueError("TrainConfig.num_heads must match the speculator")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(spec.weights, cfg)
    curve: list[LossRecord] = []
    pool = teacher_pool(spec.target, corpus, cfg.seq_len) if cfg.teacher_pool and cfg.steps else None
    for step in range(cfg.steps):
        if pool is not None:
            idx = rng.integers(0, len(pool.tokens), size=cfg.batch_size)
            batch = DistillBatch(pool.tokens[idx], pool.hidden[idx], pool.probs[idx], pool.valid[idx])
        else:
            tokens = sample_windows(corpus, cfg.batch_size, cfg.seq_len, rng)
            batch = next(extract_teacher(spec.target, tokens))
        loss, parts = train_step(spec, batch, opt, step, cfg)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append(LossRecord(step, lr_at(step, cfg), loss, parts))
            log.info("step %d loss %.4f", step, loss)
            if callback is not None:
                callback(step, spec)
    for p in spec.weights.values():
        p.requires_grad = False
        p.grad = None
    return curve


def train_target(target: TargetModel, corpus: np.ndarray, cfg: TrainConfig) -> list[LossRecord]:
    """Next-token pretraining of the toy target on ``corpus`` (cross-entropy)."""
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(target.weights, cfg)
    V = target.config.vocab_size
    curve = []
    for p in target.weights.values():
        p.requires_grad = True
    for step in range(cfg.steps):
        tokens = sample_windows(corpus, cfg.batch_size, cfg.seq_len + 1, rng)
        opt.zero_grad()
        with Graph() as g:
            logits, _ = target.forward_batch(tokens[:, :-1])
            onehot = np.eye(V, dtype=logits.dtype)[tokens[:, 1:]]
            loss = soft_cross_entropy(onehot, logits)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite target loss at step {step}")
        g.backward(loss)
        opt.step(lr_at(step, cfg))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append(LossRecord(step, lr_at(step, cfg), value))
            log.info("target step %d loss %.4f", step, value)
    for p in target.weights.values():
        p.requires_grad = False
        p.grad = None
    return curve
