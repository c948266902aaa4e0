"""Regressive draft model: an attention decoder that merges the target's last
hidden state with the emitted token, an augmenting block of decoder layers
over the whole sequence, and a chain of lightweight heads that each consume
the previously drafted token.

Head 0 reads the augmented feature through a square projector. Head ``i >= 1``
first runs the second attention decoder (hidden carrier as ``x``, previous
token embedding as ``y``) and then projects ``[carrier, embedding]``. Every
head ends with ``lm_head(rms_norm(fc_out))``. Token embeddings are the rows of
``lm_head.T``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .target import (
    LAYER_KEYS,
    KvCache,
    TargetModel,
    decoder_layer,
)
from .tensor import COS_EPS, Tensor, concat, cosine_similarity, matmul, rms_norm, softmax
from .tree import TokenTree

__all__ = [
    "SpeculatorConfig",
    "DraftState",
    "Speculator",
    "attention_decoder",
    "init_weights",
    "AD_KEYS",
]

AD_KEYS = ("norm", "wq", "bq", "wk", "bk", "wv", "bv")


@dataclass
class SpeculatorConfig:
    num_heads: int = 5
    augment_layers: int = 2
    init_noise: float = 0.01

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError("need at least one head")
        if self.augment_layers < 0:
            raise ValueError("augment_layers must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DraftState:
    hidden: np.ndarray
    token: int
    head: int


def attention_decoder(x: Tensor, y: Tensor, w: dict[str, Tensor], num_heads: int, eps: float) -> Tensor:
    """Cosine-gated merge of ``y`` into the residual stream ``x`` (no activation)."""
    d = x.shape[-1]
    if y.shape[-1] != d or x.shape[:-1] != y.shape[:-1]:
        raise ValueError(f"attention_decoder shape mismatch: {x.shape} vs {y.shape}")
    dh = d // num_heads
    lead = x.shape[:-1]
    xn = rms_norm(x, w["norm"], eps)
    xq = matmul(xn, w["wq"]) + w["bq"]
    yk = matmul(y, w["wk"]) + w["bk"]
    att = cosine_similarity(xq.reshape(*lead, num_heads, dh), yk.reshape(*lead, num_heads, dh))
    v = (matmul(y, w["wv"]) + w["bv"]).reshape(*lead, num_heads, dh)
    v = v * att.reshape(*lead, num_heads, 1)
    return x + v.reshape(*lead, d)


def init_weights(target: TargetModel, cfg: SpeculatorConfig, rng_seed: int = 0) -> dict[str, np.ndarray]:
    """Initial draft parameters derived from the target.

    Projectors start near identity (``I + U(-b, b)``), value maps and the
    embedding half of the later projectors start at ``U(-b, b)``, biases at
    zero, augmenting layers as copies of the target's last layer and all norms
    as copies of the target's final norm.
    """
    tc = target.config
    d, dt, b = tc.hidden_size, tc.np_dtype, cfg.init_noise
    rng = np.random.default_rng(rng_seed)

    def noise(*shape):
        if b == 0:
            return np.zeros(shape)
        return rng.uniform(-b, b, size=shape)

    eye = np.eye(d)
    final_norm = target.weights["final_norm"].data
    w: dict[str, np.ndarray] = {"head0_fc": eye + noise(d, d)}
    for ad in ("ad1", "ad2"):
        w[f"{ad}.norm"] = final_norm.copy()
        w[f"{ad}.wq"] = eye + noise(d, d)
        w[f"{ad}.bq"] = np.zeros(d)
        w[f"{ad}.wk"] = eye + noise(d, d)
        w[f"{ad}.bk"] = np.zeros(d)
        w[f"{ad}.wv"] = noise(d, d)
        w[f"{ad}.bv"] = np.zeros(d)
    for i in range(1, cfg.num_heads):
        w[f"head{i}_fc"] = np.concatenate([eye + noise(d, d), noise(d, d)], axis=0)
    last = tc.num_layers - 1
    for j in range(cfg.augment_layers):
        for k in LAYER_KEYS:
            w[f"augment.{j}.{k}"] = target.weights[f"layers.{last}.{k}"].data.copy()
    w["norm_final"] = final_norm.copy()
    return {k: np.asarray(v, dtype=dt) for k, v in w.items()}


class Speculator:
    """Draft model bound to a (frozen) target.

    ``weights`` holds only trainable draft parameters; ``lm_head`` and the
    tied embedding are read from the target on every use.
    """

    def __init__(self, target: TargetModel, config: SpeculatorConfig, weights: dict[str, Tensor]):
        self.target = target
        self.config = config
        self.weights = weights
        self.cache: KvCache | None = None
        self._g: np.ndarray | None = None

    @classmethod
    def create(cls, target: TargetModel, config: SpeculatorConfig | None = None, seed: int = 0) -> Speculator:
        config = config or SpeculatorConfig()
        w = init_weights(target, config, seed)
        return cls(target, config, {k: Tensor(v) for k, v in w.items()})

    # ------------------------------------------------------------ pieces

    @property
    def lm_head(self) -> Tensor:
        return self.target.weights["lm_head"]

    @property
    def embedding(self) -> np.ndarray:
        """Token embedding table ``[V, d]``: the transpose of ``lm_head``."""
        return self.target.weights["lm_head"].data.T

    def embed(self, tokens) -> Tensor:
        return Tensor(self.embedding[np.asarray(tokens, dtype=np.int64)])

    def ad(self, which: str) -> dict[str, Tensor]:
        return {k: self.weights[f"{which}.{k}"] for k in AD_KEYS}

    def augment_layer(self, j: int) -> dict[str, Tensor]:
        return {k: self.weights[f"augment.{j}.{k}"] for k in LAYER_KEYS}

    def _ad(self, which: str, x: Tensor, y: Tensor) -> Tensor:
        tc = self.target.config
        return attention_decoder(x, y, self.ad(which), tc.num_heads, tc.rms_eps)

    def pre_integrate(self, h_llm, e_next) -> Tensor:
        """First attention decoder: target hidden as ``x``, emitted-token embedding as ``y``."""
        return self._ad("ad1", _t(h_llm), _t(e_next))

    def project(self, head: int, carrier: Tensor, e_prev: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """FC projector of ``head`` followed by the final norm and ``lm_head``.

        Returns ``(fc_out, logits)``; ``fc_out`` is the draft hidden state
        compared against the target's in the distillation loss.
        """
        tc = self.target.config
        if head == 0:
            fc = matmul(carrier, self.weights["head0_fc"])
        else:
            fc = matmul(concat([carrier, e_prev], axis=-1), self.weights[f"head{head}_fc"])
        logits = matmul(rms_norm(fc, self.weights["norm_final"], tc.rms_eps), self.lm_head)
        return fc, logits

    def head0_logits(self, g) -> Tensor:
        return self.project(0, _t(g))[1]

    def next_head(self, state: DraftState, e_prev=None) -> tuple[np.ndarray, np.ndarray]:
        """Advance the regressive carrier by one drafted token; returns ``(carrier, logits)``."""
        if not 1 <= state.head < self.config.num_heads:
            raise ValueError(f"head index {state.head} outside 1..{self.config.num_heads - 1}")
        h = np.asarray(state.hidden)
        e = self.embedding[[state.token]] if e_prev is None else np.asarray(e_prev)
        row = h.ndim == 1
        h, e = np.atleast_2d(h), np.atleast_2d(e)
        carrier = self._ad("ad2", Tensor(h), Tensor(e))
        _, logits = self.project(state.head, carrier, Tensor(e))
        if row:
            return carrier.data[0], logits.data[0]
        return carrier.data, logits.data

    # ------------------------------------------------------------ augmenting block

    def new_cache(self) -> KvCache:
        tc = self.target.config
        n = max(self.config.augment_layers, 1)
        return KvCache.empty(n, tc.num_heads, tc.head_dim, tc.max_seq_len, tc.np_dtype)

    def augment(self, x, cache: KvCache | None = None) -> Tensor:
        """Run the augmenting layers over new rows ``x`` ([k, d] or [d]) causally,
        after whatever ``cache`` already holds. Without a cache the rows are the
        whole sequence."""
        x = _t(x)
        single = x.ndim == 1
        rows = x.reshape(1, 1, -1) if single else x.reshape(1, x.shape[0], -1)
        out = self._augment_batch(rows, cache)
        return out.reshape(-1) if single else out.reshape(x.shape)

    def _augment_batch(self, x: Tensor, cache: KvCache | None) -> Tensor:
        """``x`` is ``[B, T, d]``; causal over T, after the cached prefix."""
        L = self.config.augment_layers
        if L == 0:
            return x
        tc = self.target.config
        T = x.shape[1]
        n0 = cache.length if cache is not None else 0
        pos = np.arange(n0, n0 + T)
        allowed = np.concatenate([np.ones((T, n0), dtype=bool), np.tril(np.ones((T, T), dtype=bool))], axis=1)
        cos, sin = self.target.cos[pos], self.target.sin[pos]
        for j in range(L):
            x = decoder_layer(x, self.augment_layer(j), tc.num_heads, tc.rms_eps, cos, sin, allowed, cache, j)
        if cache is not None:
            cache.length = n0 + T
        return x

    # ------------------------------------------------------------ decoding interface

    def start(self, prompt) -> None:
        self.cache = self.new_cache()
        self._g = None

    def observe(self, hiddens: np.ndarray, next_tokens) -> np.ndarray:
        """Feed committed positions: target hidden at t paired with token t+1."""
        if self.cache is None:
            self.start(None)
        hiddens = np.atleast_2d(hiddens)
        x = self.pre_integrate(hiddens, self.embed(next_tokens))
        g = self.augment(x, self.cache)
        self._g = g.data[-1]
        return self._g

    def propose(self, tree_shape, temperature: float = 0.0, rng: np.random.Generator | None = None) -> TokenTree:
        if self._g is None:
            raise RuntimeError("observe() must run before propose()")
        return self.expand_tree(self._g, tree_shape, temperature, rng)

    def draft(self, h_llm, next_token: int, tree_shape, temperature: float = 0.0, rng=None) -> TokenTree:
        """Pre-integrate + augment one position, then expand a static tree."""
        self.observe(np.atleast_2d(h_llm), [next_token])
        return self.propose(tree_shape, temperature, rng)

    def expand_tree(self, g: np.ndarray, tree_shape, temperature: float = 0.0, rng=None) -> TokenTree:
        """Expand ``tree_shape`` (children per node at each depth) from feature ``g``.

        At temperature 0 each frontier node keeps its top-k tokens (lowest id on
        ties). Otherwise children are drawn i.i.d. from the node's draft
        distribution at that temperature, so stored distributions are the exact
        proposals seen by rejection sampling.
        """
        tree_shape = [int(k) for k in tree_shape]
        if len(tree_shape) > self.config.num_heads:
            raise ValueError(f"tree depth {len(tree_shape)} exceeds {self.config.num_heads} heads")
        if any(k < 1 for k in tree_shape):
            raise ValueError("branching factors must be >= 1")
        V = self.target.config.vocab_size
        tokens: list[int] = []
        parents: list[int] = []
        probs: list[np.ndarray] = []
        if not tree_shape:
            return TokenTree(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, V)))
        g = np.asarray(g)
        _, logits = self.project(0, Tensor(g[None]))
        frontier = [-1]
        carriers = g[None]
        dist_rows = logits.data
        for depth, k in enumerate(tree_shape):
            new_frontier, new_tokens = [], []
            qs = _distribution(dist_rows, temperature)
            for row, parent in enumerate(frontier):
                q = qs[row]
                if temperature == 0:
                    kids = np.argsort(-q, kind="stable")[:k]
                else:
                    kids = _draw(q, k, rng)
                for tok in kids:
                    new_frontier.append(len(tokens))
                    new_tokens.append(int(tok))
                    tokens.append(int(tok))
                    parents.append(parent)
                    probs.append(q)
            if depth + 1 == len(tree_shape):
                break
            # one batched regressive step for the whole new frontier
            row_of = {node: r for r, node in enumerate(frontier)}
            par_rows = [row_of[parents[i]] for i in new_frontier]
            e = self.embed(new_tokens)
            carrier = self._ad("ad2", Tensor(carriers[par_rows]), e)
            _, logits = self.project(depth + 1, carrier, e)
            carriers, dist_rows, frontier = carrier.data, logits.data, new_frontier
        return TokenTree(np.asarray(tokens), np.asarray(parents), np.asarray(probs))

    # ------------------------------------------------------------ training forward

    def forward_train(self, tokens: np.ndarray, hiddens: Tensor | np.ndarray) -> tuple[list[Tensor], list[Tensor]]:
        """Teacher-forced forward over a batch.

        ``tokens`` ``[B, T]``, ``hiddens`` ``[B, T, d]`` (target, final-normed).
        Head ``i`` at position ``t`` consumes tokens ``t+1..t+1+i`` and predicts
        token ``t+2+i``; its outputs cover ``t < T-1-i``. Returns per-head
        ``fc_out`` and logits lists.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        B, T = tokens.shape
        h = _t(hiddens)
        emb = self.embedding
        x = self.pre_integrate(h[:, : T - 1], Tensor(emb[tokens[:, 1:]]))
        g = self._augment_batch(x, None)
        fcs, logits = [], []
        fc, lg = self.project(0, g)
        fcs.append(fc)
        logits.append(lg)
        carrier = g
        for i in range(1, self.config.num_heads):
            n = max(T - 1 - i, 0)
            e = Tensor(emb[tokens[:, 1 + i: 1 + i + n]])
            carrier = self._ad("ad2", carrier[:, :n], e)
            fc, lg = self.project(i, carrier, e)
            fcs.append(fc)
            logits.append(lg)
        return fcs, logits


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _distribution(logits: np.ndarray, temperature: float) -> np.ndarray:
    return softmax(Tensor(np.asarray(logits, dtype=np.float64)), temperature if temperature > 0 else 1.0).data


def _draw(q: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    c = np.cumsum(q)
    u = rng.random(k) * c[-1]
    return np.minimum(np.searchsorted(c, u, side="right"), len(q) - 1)
