from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treespec.tree import (
    CompressedMask,
    TokenTree,
    TreeStructureError,
    build_mask,
    compress_mask,
    dump_mask,
    dump_tree,
    expand,
    from_paths,
    leaf_paths,
)

GOLDEN = Path(__file__).parent / "golden"


@st.composite
def trees(draw, max_nodes=64):
    n = draw(st.integers(1, max_nodes))
    parents = [draw(st.integers(-1, i - 1)) for i in range(n)]
    tokens = draw(st.lists(st.integers(0, 30), min_size=n, max_size=n))
    return TokenTree(tokens, parents)


def closure_oracle(tree):
    n = len(tree)
    m = np.zeros((n, n), dtype=bool)
    for i in range(n):
        j = i
        while j >= 0:
            m[i, j] = True
            j = int(tree.parents[j])
    return m


def test_chain_mask_is_lower_triangular():
    t = TokenTree.chain([5, 6, 7, 8])
    assert np.array_equal(build_mask(t), np.tril(np.ones((4, 4), dtype=bool)))


def test_star_mask_is_identity():
    t = TokenTree([1, 2, 3], [-1, -1, -1])
    assert np.array_equal(build_mask(t), np.eye(3, dtype=bool))


def test_random_12_node_tree_matches_closure(rng):
    t = TokenTree(rng.integers(0, 9, 12), [int(rng.integers(-1, i)) for i in range(12)])
    assert np.array_equal(build_mask(t), closure_oracle(t))


def test_malformed_parents_rejected():
    with pytest.raises(TreeStructureError):
        TokenTree([1, 2], [-1, 1])
    with pytest.raises(TreeStructureError):
        TokenTree([1, 2], [-1, -2])
    with pytest.raises(TreeStructureError):
        TokenTree([1], [-1, 0])


def test_probs_validated():
    with pytest.raises(TreeStructureError):
        TokenTree([1], [-1], probs=np.array([[0.5, 0.4]]))
    TokenTree([1], [-1], probs=np.array([[0.5, 0.5]]))


def test_depths_and_children():
    t = TokenTree([1, 2, 3, 4], [-1, 0, 0, 2])
    assert t.depths.tolist() == [1, 2, 2, 3] and t.depth == 3
    assert t.children(-1).tolist() == [0] and t.children(0).tolist() == [1, 2]
    assert t.path(3) == [0, 2, 3]


def test_chain_intervals_nest():
    c = compress_mask(TokenTree.chain([1, 2, 3]))
    assert list(zip(c.enter.tolist(), c.exit.tolist())) == [(0, 5), (1, 4), (2, 3)]
    assert np.array_equal(expand(c, 3), np.tril(np.ones((3, 3), dtype=bool)))


def test_single_node():
    c = compress_mask(TokenTree([4], [-1]))
    assert np.array_equal(expand(c, 1), np.ones((1, 1), dtype=bool))


@given(trees())
def test_compress_expand_roundtrip(t):
    assert np.array_equal(expand(compress_mask(t), len(t)), build_mask(t))


@given(trees())
def test_interval_nesting_mirrors_ancestry(t):
    c = compress_mask(t)
    m = closure_oracle(t)
    for a in range(len(t)):
        for b in range(len(t)):
            contains = c.enter[a] < c.enter[b] and c.exit[b] < c.exit[a]
            assert contains == (m[b, a] and a != b)


@given(trees())
def test_mask_is_reflexive_and_transitive(t):
    m = build_mask(t)
    assert m.diagonal().all()
    mi = m.astype(int)
    assert np.array_equal((mi @ mi) > 0, m)


@given(trees())
def test_path_restricted_mask_is_causal(t):
    m = build_mask(t)
    for i in range(len(t)):
        p = t.path(i)
        assert np.array_equal(m[np.ix_(p, p)], np.tril(np.ones((len(p), len(p)), dtype=bool)))


def test_expand_rejects_malformed():
    with pytest.raises(TreeStructureError):
        expand(CompressedMask(np.array([0, 1]), np.array([3, 1])), 2)  # enter == exit
    with pytest.raises(TreeStructureError):
        expand(CompressedMask(np.array([0, 1]), np.array([2, 3])), 2)  # crossing
    with pytest.raises(TreeStructureError):
        expand(CompressedMask(np.array([0]), np.array([1])), 2)


def test_leaf_paths_examples():
    assert leaf_paths(TokenTree.chain([3, 4, 5])) == [[3, 4, 5]]
    t = TokenTree([1, 2, 3, 4, 5, 6], [-1, -1, 0, 0, 1, 1])
    assert leaf_paths(t) == [[1, 3], [1, 4], [2, 5], [2, 6]]


def _canonical(t):
    def sub(i):
        return tuple(sorted((int(t.tokens[c]), sub(c)) for c in t.children(i)))

    return sub(-1)


@given(trees(max_nodes=30))
def test_leaf_paths_prefix_merge_roundtrip(t):
    # prefix merging identifies equal-token siblings, so compare against the merged form
    merged = from_paths([[int(t.tokens[j]) for j in t.path(i)] for i in range(len(t))])
    assert _canonical(from_paths(leaf_paths(t))) == _canonical(merged)


def test_golden_dumps():
    t = TokenTree([10, 11, 12, 13, 14, 15], [-1, -1, 0, 0, 1, 4])
    assert dump_tree(t) + "\n" == (GOLDEN / "tree_dump.txt").read_text()
    assert dump_mask(build_mask(t)) + "\n" == (GOLDEN / "mask_dump.txt").read_text()
