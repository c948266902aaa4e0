"""Corpora: synthetic order-2 Markov chains and byte-level text."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["MarkovSource", "markov_source", "ByteTokenizer", "gen_corpus", "read_corpus", "write_corpus"]


@dataclass
class MarkovSource:
    """``transitions[a, b]`` is the distribution of the token following ``a, b``."""

    transitions: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[0]

    def sample(self, length: int, rng: np.random.Generator) -> np.ndarray:
        V = self.vocab_size
        out = np.empty(length, dtype=np.int64)
        out[:2] = rng.integers(0, V, size=min(2, length))
        cdf = np.cumsum(self.transitions, axis=-1)
        u = rng.random(length)
        for t in range(2, length):
            row = cdf[out[t - 2], out[t - 1]]
            out[t] = min(np.searchsorted(row, u[t] * row[-1], side="right"), V - 1)
        return out


def markov_source(vocab_size: int, rng: np.random.Generator, support: int = 4,
                  concentration: float = 0.5, order1_weight: float = 0.0) -> MarkovSource:
    """Random sparse order-2 chain.

    Each context ``(a, b)`` puts Dirichlet(``concentration``) mass on
    ``support`` random successors. ``order1_weight`` mixes in a sparse chain
    that depends on ``b`` only, which makes the process easier to predict
    several steps ahead.
    """
    V = vocab_size
    support = min(support, V)
    trans = np.zeros((V, V, V))
    for a in range(V):
        for b in range(V):
            idx = rng.choice(V, size=support, replace=False)
            trans[a, b, idx] = rng.dirichlet(np.full(support, concentration))
    if order1_weight > 0:
        first = np.zeros((V, V))
        for b in range(V):
            idx = rng.choice(V, size=support, replace=False)
            first[b, idx] = rng.dirichlet(np.full(support, concentration))
        trans = (1 - order1_weight) * trans + order1_weight * first[None, :, :]
    trans /= trans.sum(axis=-1, keepdims=True)
    return MarkovSource(trans)


class ByteTokenizer:
    """Bytes map to ids 0..255; optional special tokens follow."""

    def __init__(self, specials: tuple[str, ...] = ()):
        self.specials = tuple(specials)

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.specials)

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def decode(self, ids) -> bytes:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256)


def gen_corpus(kind: str, seed: int = 0, *, vocab_size: int = 64, length: int = 100_000,
               paths=(), **markov_kw) -> tuple[np.ndarray, MarkovSource | None]:
    """``kind`` is ``"markov"`` (synthetic) or ``"text"`` (bytes of ``paths``)."""
    if kind == "markov":
        rng = np.random.default_rng(seed)
        src = markov_source(vocab_size, rng, **markov_kw)
        return src.sample(length, rng), src
    if kind == "text":
        tok = ByteTokenizer()
        ids: list[int] = []
        for p in paths:
            ids.extend(tok.encode(Path(p).read_bytes()))
        return np.asarray(ids, dtype=np.int64), None
    raise ValueError(f"unknown corpus kind {kind!r}")


def write_corpus(path, ids) -> None:
    """Whitespace-separated integer ids, 32 per line."""
    ids = [str(int(i)) for i in ids]
    lines = [" ".join(ids[i:i + 32]) for i in range(0, len(ids), 32)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path, kind: str = "auto") -> np.ndarray:
    """Read integer ids, or raw bytes when ``kind="bytes"`` (``auto`` sniffs)."""
    raw = Path(path).read_bytes()
    if kind == "auto":
        try:
            tokens = raw.decode("ascii").split()
            kind = "ids" if tokens and all(t.isdigit() for t in tokens) else "bytes"
        except UnicodeDecodeError:
            kind = "bytes"
    if kind == "ids":
        return np.asarray([int(t) for t in raw.decode("ascii").split()], dtype=np.int64)
    if kind == "bytes":
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    raise ValueError(f"unknown corpus kind {kind!r}")
