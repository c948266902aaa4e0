"""Tree verification and the speculative decode loop.

Each step runs the target once over ``[anchor, tree nodes...]`` under the tree
mask, accepts a root-anchored path and always emits one extra token sampled
(or argmax-ed) from the target at the last accepted node. At temperature 0
the output is exactly the target's greedy continuation; at temperature > 0
multi-candidate rejection sampling keeps the target distribution.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .target import CapacityError, TargetModel, sample_from, select_token
from .tensor import Tensor, softmax
from .tree import TokenTree, build_mask, compress_mask, with_anchor

__all__ = [
    "VerifyOutcome",
    "StepRecord",
    "StepTrace",
    "Drafter",
    "OracleDrafter",
    "verify_greedy",
    "verify_sampled",
    "spec_decode_loop",
]


@dataclass
class VerifyOutcome:
    tokens: list[int]  # accepted draft tokens followed by the bonus token
    nodes: list[int]  # accepted tree node indices (root-anchored path)

    @property
    def keep_rows(self) -> list[int]:
        """Rows of the verification block to keep in the cache: anchor plus accepted nodes."""
        return [0] + [n + 1 for n in self.nodes]

    @property
    def keep_len(self) -> int:
        return 1 + len(self.nodes)


@dataclass
class StepRecord:
    step: int
    drafted: int
    accepted: int  # tokens emitted this step, bonus included
    cumulative: int
    depth_accepted: int = 0
    seconds: float = 0.0


@dataclass
class StepTrace:
    """Per-step accounting. The token produced by the prompt prefill is counted
    in ``prefill_tokens``, not as a step."""

    records: list[StepRecord] = field(default_factory=list)
    prefill_tokens: int = 0

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def emitted(self) -> int:
        return sum(r.accepted for r in self.records)

    @property
    def total_tokens(self) -> int:
        return self.prefill_tokens + self.emitted

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(asdict(r)) for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str, prefill_tokens: int = 0) -> StepTrace:
        recs = [StepRecord(**json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(recs, prefill_tokens)


class Drafter(Protocol):
    def start(self, prompt) -> None: ...

    def observe(self, hiddens: np.ndarray, next_tokens) -> object: ...

    def propose(self, tree_shape, temperature: float, rng) -> TokenTree: ...


def verify_greedy(tree: TokenTree, target_logits: np.ndarray) -> VerifyOutcome:
    """``target_logits`` row 0 is the anchor, row ``i + 1`` is tree node ``i``."""
    nodes: list[int] = []
    tokens: list[int] = []
    cur = -1
    while True:
        best = int(np.argmax(target_logits[cur + 1]))
        match = [c for c in tree.children(cur) if tree.tokens[c] == best]
        if not match:
            tokens.append(best)
            return VerifyOutcome(tokens, nodes)
        cur = int(match[0])
        nodes.append(cur)
        tokens.append(best)


def verify_sampled(tree: TokenTree, target_probs: np.ndarray, rng: np.random.Generator) -> VerifyOutcome:
    """Multi-candidate rejection sampling down the tree.

    Children of a node are tried in order; child ``c`` (drafted from ``q``) is
    accepted with probability ``min(1, p(c) / q(c))``, otherwise ``p`` becomes
    ``normalize(max(p - q, 0))``. If every child is rejected the extra token is
    drawn from the final ``p``.
    """
    if tree.probs is None and len(tree):
        raise ValueError("sampled verification needs per-node draft distributions")
    nodes: list[int] = []
    tokens: list[int] = []
    cur = -1
    while True:
        p = np.asarray(target_probs[cur + 1], dtype=np.float64)
        accepted = None
        for c in tree.children(cur):
            q = tree.probs[c]
            tok = int(tree.tokens[c])
            if q[tok] <= 0:
                raise RuntimeError(f"drafted node {c} has zero draft probability")
            if rng.random() < min(1.0, p[tok] / q[tok]):
                accepted = int(c)
                break
            resid = np.maximum(p - q, 0.0)
            s = resid.sum()
            # p(tok) < q(tok) on rejection, so the residual has mass
            p = resid / s if s > 0 else p
        if accepted is None:
            tokens.append(sample_from(p, rng))
            return VerifyOutcome(tokens, nodes)
        nodes.append(accepted)
        tokens.append(int(tree.tokens[accepted]))
        cur = accepted


def _verify_mask(tree: TokenTree, compressed: bool):
    anchored = TokenTree(
        np.concatenate([[0], tree.tokens]), np.concatenate([[-1], tree.parents + 1]).astype(np.int64)
    )
    if compressed:
        return compress_mask(anchored)
    return build_mask(anchored)


def spec_decode_loop(
    target: TargetModel,
    drafter: Drafter,
    prompt,
    max_new: int,
    temperature: float = 0.0,
    tree_shape=(4, 2, 2, 1, 1),
    rng: np.random.Generator | None = None,
    compressed_mask: bool = False,
) -> tuple[list[int], StepTrace]:
    """Draft -> verify -> compact caches, until ``max_new`` tokens are emitted."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    trace = StepTrace()
    if max_new <= 0:
        return [], trace
    rng = rng if rng is not None else np.random.default_rng(0)
    tree_shape = list(tree_shape)
    cache = target.new_cache()
    logits, hidden = target.forward(prompt, cache)
    out = [select_token(logits[-1], temperature, rng)]
    trace.prefill_tokens = 1
    drafter.start(prompt)
    drafter.observe(hidden, prompt[1:] + out)
    cap = target.config.max_seq_len
    while len(out) < max_new:
        t0 = time.perf_counter()
        remaining = max_new - len(out)
        shape = tree_shape[: remaining - 1]
        tree = drafter.propose(shape, temperature, rng) if shape else TokenTree.empty()
        if cache.length + 1 + len(tree) > cap:
            raise CapacityError("verification block would exceed max_seq_len")
        block = np.concatenate([[out[-1]], tree.tokens]).astype(np.int64)
        mask = _verify_mask(tree, compressed_mask)
        n0 = cache.length
        logits, hidden = target.forward(block, cache, mask=mask)
        if temperature == 0:
            res = verify_greedy(tree, logits)
        else:
            probs = softmax(Tensor(logits.astype(np.float64)), temperature).data
            res = verify_sampled(tree, probs, rng)
        cache.keep_rows(n0, res.keep_rows)
        drafter.observe(hidden[res.keep_rows], res.tokens)
        out.extend(res.tokens)
        trace.records.append(
            StepRecord(
                step=len(trace.records),
                drafted=len(tree),
                accepted=len(res.tokens),
                cumulative=len(out),
                depth_accepted=len(res.nodes),
                seconds=time.perf_counter() - t0,
            )
        )
    return out, trace


class OracleDrafter:
    """Drafts the target's own greedy chain (one token per depth).

    An upper-bound reference: at temperature 0 every drafted token is accepted.
    Branching factors above 1 are ignored.
    """

    def __init__(self, target: TargetModel):
        self.target = target
        self.cache = None
        self._seq: list[int] = []

    def start(self, prompt) -> None:
        # observe() delivers every later token, prompt included
        self._seq = [int(prompt[0])]
        self.cache = self.target.new_cache()

    def observe(self, hiddens, next_tokens) -> None:
        self._seq.extend(int(t) for t in next_tokens)

    def propose(self, tree_shape, temperature: float = 0.0, rng=None) -> TokenTree:
        depth = len(tree_shape)
        V = self.target.config.vocab_size
        # bring the private cache up to everything but the newest token
        todo = self._seq[self.cache.length: len(self._seq) - 1]
        if todo:
            self.target.forward(todo, self.cache)
        n0 = self.cache.length
        tokens, probs = [], []
        last = self._seq[-1]
        for _ in range(depth):
            logits, _ = self.target.forward([last], self.cache)
            last = int(np.argmax(logits[-1]))
            tokens.append(last)
            probs.append(np.eye(V)[last])
        self.cache.rollback(n0)
        return TokenTree.chain(tokens, np.asarray(probs).reshape(depth, V))
