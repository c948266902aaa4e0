"""Token trees and their attention masks.

A tree is stored in topological order (parents before children). Nodes whose
parent is -1 hang directly off the anchor, i.e. the last committed token.
Two mask encodings are provided: the ``N x N`` ancestor-or-self matrix and a
compressed per-node ``(enter, exit)`` interval pair from a depth-first walk,
where ``a`` is an ancestor-or-self of ``b`` iff
``enter[a] <= enter[b] < exit[a]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TokenTree",
    "CompressedMask",
    "TreeStructureError",
    "build_mask",
    "compress_mask",
    "expand",
    "leaf_paths",
    "from_paths",
    "with_anchor",
    "dump_tree",
    "dump_mask",
]


class TreeStructureError(ValueError):
    pass


@dataclass
class TokenTree:
    tokens: np.ndarray
    parents: np.ndarray
    probs: np.ndarray | None = None  # [N, V] distribution each node was drafted from
    depths: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        if len(self.tokens) != len(self.parents):
            raise TreeStructureError("tokens and parents differ in length")
        n = len(self.tokens)
        depths = np.zeros(n, dtype=np.int64)
        for i, p in enumerate(self.parents):
            if p < -1 or p >= i:
                raise TreeStructureError(f"node {i} has parent {p}; parents must precede children")
            depths[i] = 1 if p < 0 else depths[p] + 1
        self.depths = depths
        if self.probs is not None:
            self.probs = np.asarray(self.probs)
            if self.probs.shape[0] != n:
                raise TreeStructureError("probs must have one row per node")
            if n and np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
                raise TreeStructureError("draft distributions must sum to 1")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def depth(self) -> int:
        return int(self.depths.max()) if len(self) else 0

    def children(self, i: int) -> np.ndarray:
        """Children of node ``i`` (``-1`` for the anchor), in node order."""
        return np.flatnonzero(self.parents == i)

    def path(self, i: int) -> list[int]:
        out = []
        while i >= 0:
            out.append(i)
            i = int(self.parents[i])
        return out[::-1]

    @classmethod
    def chain(cls, tokens, probs=None) -> TokenTree:
        n = len(tokens)
        return cls(np.asarray(tokens), np.arange(n) - 1, probs)

    @classmethod
    def empty(cls) -> TokenTree:
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class CompressedMask:
    enter: np.ndarray
    exit: np.ndarray

    def __len__(self) -> int:
        return len(self.enter)


def build_mask(tree: TokenTree) -> np.ndarray:
    """Boolean ancestor-or-self matrix: ``m[i, j]`` iff ``j`` is on the path to ``i``."""
    n = len(tree)
    m = np.zeros((n, n), dtype=bool)
    for i in range(n):
        p = int(tree.parents[i])
        if p >= i or p < -1:
            raise TreeStructureError(f"node {i} has invalid parent {p}")
        if p >= 0:
            m[i] = m[p]
        m[i, i] = True
    return m


def compress_mask(tree: TokenTree) -> CompressedMask:
    n = len(tree)
    enter = np.zeros(n, dtype=np.int64)
    exit_ = np.zeros(n, dtype=np.int64)
    kids: list[list[int]] = [[] for _ in range(n)]
    roots = []
    for i, p in enumerate(tree.parents):
        (roots if p < 0 else kids[p]).append(i)
    clock = 0
    # iterative DFS; a node is pushed twice (open, close)
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        node, done = stack.pop()
        if done:
            exit_[node] = clock
            clock += 1
            continue
        enter[node] = clock
        clock += 1
        stack.append((node, True))
        stack.extend((c, False) for c in reversed(kids[node]))
    return CompressedMask(enter, exit_)


def expand(cmask: CompressedMask, n_nodes: int) -> np.ndarray:
    enter = np.asarray(cmask.enter, dtype=np.int64)
    exit_ = np.asarray(cmask.exit, dtype=np.int64)
    if len(enter) != n_nodes or len(exit_) != n_nodes:
        raise TreeStructureError("compressed mask length does not match node count")
    if np.any(enter >= exit_):
        raise TreeStructureError("every interval needs enter < exit")
    ea, eb = enter[:, None], enter[None, :]
    xa, xb = exit_[:, None], exit_[None, :]
    # any two intervals must be nested or disjoint
    crossing = (ea < eb) & (eb < xa) & (xa < xb)
    if np.any(crossing):
        raise TreeStructureError("intervals overlap without nesting")
    return (enter[None, :] <= enter[:, None]) & (enter[:, None] < exit_[None, :])


def leaf_paths(tree: TokenTree) -> list[list[int]]:
    has_child = np.zeros(len(tree), dtype=bool)
    has_child[tree.parents[tree.parents >= 0]] = True
    return [[int(tree.tokens[j]) for j in tree.path(i)] for i in range(len(tree)) if not has_child[i]]


def from_paths(paths) -> TokenTree:
    """Prefix-merge token sequences into a tree (first-seen order)."""
    index: dict[tuple, int] = {}
    tokens, parents = [], []
    for path in paths:
        parent = -1
        for k in range(len(path)):
            key = tuple(path[: k + 1])
            if key not in index:
                index[key] = len(tokens)
                tokens.append(path[k])
                parents.append(parent)
            parent = index[key]
    return TokenTree(np.asarray(tokens, dtype=np.int64), np.asarray(parents, dtype=np.int64))


def with_anchor(mask: np.ndarray) -> np.ndarray:
    """Prepend the anchor row/column: every node sees the anchor."""
    n = mask.shape[0]
    out = np.zeros((n + 1, n + 1), dtype=bool)
    out[:, 0] = True
    out[1:, 1:] = mask
    return out


def dump_tree(tree: TokenTree) -> str:
    lines = []

    def walk(i, indent):
        for c in tree.children(i):
            lines.append(f"{'  ' * indent}[{c}] {int(tree.tokens[c])}")
            walk(c, indent + 1)

    walk(-1, 0)
    return "\n".join(lines)


def dump_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(mask))
