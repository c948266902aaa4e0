"""Toy Llama-style decoder (RMSNorm pre-norm, rotary positions, SwiGLU MLP)
that plays the role of the target LLM, plus its KV cache and plain decoding."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Tensor, concat, matmul, rms_norm, rope, silu, softmax
from .tree import CompressedMask, expand

__all__ = [
    "TargetConfig",
    "KvCache",
    "TargetModel",
    "CapacityError",
    "decoder_layer",
    "init_layer",
    "rope_tables",
    "rollback_cache",
    "vanilla_decode",
    "select_token",
    "sample_from",
    "LAYER_KEYS",
]

LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


class CapacityError(RuntimeError):
    """Raised when a forward would run past ``max_seq_len``."""


@dataclass
class TargetConfig:
    vocab_size: int = 256
    hidden_size: int = 128
    num_heads: int = 4
    num_layers: int = 4
    mlp_hidden: int | None = None
    max_seq_len: int = 1024
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = int(round(4 * self.hidden_size * 2 / 3))
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if (self.hidden_size // self.num_heads) % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        if self.vocab_size < 2 or self.num_layers < 1 or self.max_seq_len < 2:
            raise ValueError("need vocab_size >= 2, num_layers >= 1, max_seq_len >= 2")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


def rope_tables(max_len: int, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.arange(max_len, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


@dataclass
class KvCache:
    """Per-layer key/value buffers of shape ``[layers, heads, max_len, head_dim]``."""

    keys: np.ndarray
    values: np.ndarray
    length: int = 0

    @classmethod
    def empty(cls, num_layers: int, num_heads: int, head_dim: int, max_len: int, dtype) -> KvCache:
        shape = (num_layers, num_heads, max_len, head_dim)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), 0)

    @property
    def capacity(self) -> int:
        return self.keys.shape[2]

    def rollback(self, keep_len: int) -> KvCache:
        if keep_len < 0 or keep_len > self.length:
            raise ValueError(f"cannot keep {keep_len} of {self.length} cached positions")
        self.length = keep_len
        return self

    def keep_rows(self, start: int, rows) -> KvCache:
        """Keep ``[0, start)`` plus the given rows (offsets from ``start``), compacted."""
        rows = np.asarray(rows, dtype=np.int64)
        if start > self.length or np.any(start + rows >= self.length) or np.any(rows < 0):
            raise ValueError("rows outside the cached range")
        src = start + rows
        n = len(rows)
        self.keys[:, :, start:start + n] = self.keys[:, :, src]
        self.values[:, :, start:start + n] = self.values[:, :, src]
        self.length = start + n
        return self

    def copy(self) -> KvCache:
        return KvCache(self.keys.copy(), self.values.copy(), self.length)


def rollback_cache(cache: KvCache, keep_len: int) -> KvCache:
    return cache.rollback(keep_len)


def init_layer(rng: np.random.Generator, cfg: TargetConfig) -> dict[str, np.ndarray]:
    d, m = cfg.hidden_size, cfg.mlp_hidden
    dt = cfg.np_dtype

    def lin(n_in, n_out):
        return (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dt)

    return {
        "attn_norm": np.ones(d, dtype=dt),
        "wq": lin(d, d),
        "wk": lin(d, d),
        "wv": lin(d, d),
        "wo": lin(d, d),
        "mlp_norm": np.ones(d, dtype=dt),
        "w_gate": lin(d, m),
        "w_up": lin(d, m),
        "w_down": lin(m, d),
    }


def decoder_layer(
    x: Tensor,
    w: dict[str, Tensor],
    num_heads: int,
    eps: float,
    cos: np.ndarray,
    sin: np.ndarray,
    allowed: np.ndarray,
    cache: KvCache | None = None,
    layer: int = 0,
) -> Tensor:
    """One pre-norm block on ``x`` of shape ``[B, T, d]``.

    ``cos``/``sin`` are the rotary rows for the T new positions; ``allowed`` is
    the boolean ``[T, S]`` attention pattern over the S visible keys (cached
    prefix first, then the T new positions). With a cache, new keys/values are
    written at ``cache.length`` onward (the caller advances the length).
    """
    B, T, d = x.shape
    dh = d // num_heads
    h = rms_norm(x, w["attn_norm"], eps)

    def heads(t):
        return t.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)

    q = rope(heads(matmul(h, w["wq"])), cos, sin)
    k = rope(heads(matmul(h, w["wk"])), cos, sin)
    v = heads(matmul(h, w["wv"]))
    if cache is not None:
        n0 = cache.length
        if n0 + T > cache.capacity:
            raise CapacityError(f"sequence of {n0 + T} exceeds capacity {cache.capacity}")
        # cached forwards are inference-only: keys/values are read back as constants
        cache.keys[layer, :, n0:n0 + T] = k.data[0]
        cache.values[layer, :, n0:n0 + T] = v.data[0]
        k = Tensor(cache.keys[layer, :, :n0 + T][None])
        v = Tensor(cache.values[layer, :, :n0 + T][None])
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = softmax(scores, mask=None if allowed.all() else allowed)
    o = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    x = x + matmul(o, w["wo"])
    h2 = rms_norm(x, w["mlp_norm"], eps)
    mlp = silu(matmul(h2, w["w_gate"])) * matmul(h2, w["w_up"])
    return x + matmul(mlp, w["w_down"])


def _mask_matrix(mask, t: int) -> np.ndarray:
    if isinstance(mask, CompressedMask):
        mask = expand(mask, t)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t, t):
        raise ValueError(f"mask shape {mask.shape} does not cover {t} new positions")
    return mask


def select_token(logits: np.ndarray, temperature: float, rng: np.random.Generator | None) -> int:
    """Argmax (lowest id on ties) at temperature 0, else a draw from softmax(logits/T)."""
    if temperature == 0:
        return int(np.argmax(logits))
    p = softmax(Tensor(np.asarray(logits, dtype=np.float64)), temperature).data
    return sample_from(p, rng)


def sample_from(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    u = rng.random() * c[-1]
    return int(min(np.searchsorted(c, u, side="right"), len(p) - 1))


class TargetModel:
    """Frozen-at-inference toy LLM. ``weights`` maps names to Tensors."""

    def __init__(self, config: TargetConfig, weights: dict[str, Tensor]):
        self.config = config
        self.weights = weights
        self.cos, self.sin = rope_tables(
            config.max_seq_len, config.head_dim, config.rope_theta, config.np_dtype
        )

    @classmethod
    def random(cls, config: TargetConfig, seed: int = 0) -> TargetModel:
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        d, V = config.hidden_size, config.vocab_size
        w = {
            "embed": rng.standard_normal((V, d)).astype(dt),
            "final_norm": np.ones(d, dtype=dt),
            "lm_head": (rng.standard_normal((d, V)) / np.sqrt(d)).astype(dt),
        }
        for i in range(config.num_layers):
            for k, v in init_layer(rng, config).items():
                w[f"layers.{i}.{k}"] = v
        return cls(config, {k: Tensor(v) for k, v in w.items()})

    def layer(self, i: int) -> dict[str, Tensor]:
        return {k: self.weights[f"layers.{i}.{k}"] for k in LAYER_KEYS}

    def parameters(self) -> dict[str, Tensor]:
        return self.weights

    def new_cache(self) -> KvCache:
        c = self.config
        return KvCache.empty(c.num_layers, c.num_heads, c.head_dim, c.max_seq_len, c.np_dtype)

    def forward(self, tokens, cache: KvCache | None = None, mask=None) -> tuple[np.ndarray, np.ndarray]:
        """Run ``T`` new tokens; returns ``(logits [T, V], final-normed hidden [T, d])``.

        ``mask`` (boolean ``[T, T]`` ancestor-or-self matrix, or a
        :class:`CompressedMask`) lays the new tokens out as a tree hanging off
        the cached prefix; node positions are ``prefix + depth``.
        """
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        T = len(tokens)
        cfg = self.config
        n0 = cache.length if cache is not None else 0
        if n0 + T > cfg.max_seq_len:
            raise CapacityError(f"sequence of {n0 + T} exceeds max_seq_len {cfg.max_seq_len}")
        if mask is None:
            local = np.tril(np.ones((T, T), dtype=bool))
        else:
            local = _mask_matrix(mask, T)
        positions = n0 + local.sum(axis=1) - 1
        allowed = np.concatenate([np.ones((T, n0), dtype=bool), local], axis=1)
        logits, hidden = self._run(tokens[None], positions, allowed, cache)
        if cache is not None:
            cache.length = n0 + T
        return logits.data[0], hidden.data[0]

    def forward_batch(self, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        """Causal forward over ``[B, T]`` ids without a cache; graph-recordable."""
        tokens = np.asarray(tokens, dtype=np.int64)
        T = tokens.shape[1]
        if T > self.config.max_seq_len:
            raise CapacityError(f"sequence of {T} exceeds max_seq_len {self.config.max_seq_len}")
        allowed = np.tril(np.ones((T, T), dtype=bool))
        return self._run(tokens, np.arange(T), allowed, None)

    def _run(self, tokens, positions, allowed, cache):
        cfg = self.config
        x = self.weights["embed"][tokens]
        cos, sin = self.cos[positions], self.sin[positions]
        for i in range(cfg.num_layers):
            x = decoder_layer(x, self.layer(i), cfg.num_heads, cfg.rms_eps, cos, sin, allowed, cache, i)
        hidden = rms_norm(x, self.weights["final_norm"], cfg.rms_eps)
        return matmul(hidden, self.weights["lm_head"]), hidden


def vanilla_decode(
    model: TargetModel,
    prompt,
    max_new: int,
    temperature: float = 0.0,
    rng_seed: int | None = 0,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """One target forward per emitted token, using the KV cache."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if max_new <= 0:
        return []
    rng = rng if rng is not None else np.random.default_rng(rng_seed)
    cache = model.new_cache()
    logits, _ = model.forward(prompt, cache)
    out = [select_token(logits[-1], temperature, rng)]
    while len(out) < max_new:
        logits, _ = model.forward([out[-1]], cache)
        out.append(select_token(logits[-1], temperature, rng))
    return out
