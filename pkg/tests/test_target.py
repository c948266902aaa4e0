import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treespec.target import CapacityError, TargetConfig, TargetModel, rollback_cache, vanilla_decode
from treespec.tree import TokenTree, build_mask, compress_mask

from .conftest import tiny_target


def test_config_defaults_and_validation():
    c = TargetConfig()
    assert (c.vocab_size, c.hidden_size, c.num_heads, c.num_layers) == (256, 128, 4, 4)
    assert c.mlp_hidden == round(4 * 128 * 2 / 3) and c.rope_theta == 10000.0 and c.rms_eps == 1e-5
    with pytest.raises(ValueError):
        TargetConfig(hidden_size=10, num_heads=4)
    with pytest.raises(ValueError):
        TargetConfig(vocab_size=1)
    with pytest.raises(ValueError):
        TargetConfig(num_layers=0)
    with pytest.raises(ValueError):
        TargetConfig(max_seq_len=1)


def test_forward_shapes(target64):
    logits, hidden = target64.forward([1, 2, 3], target64.new_cache())
    assert logits.shape == (3, 20) and hidden.shape == (3, 16)


def test_hidden_is_final_normed(target64):
    from treespec.tensor import Tensor, matmul

    logits, hidden = target64.forward([4, 5])
    assert np.allclose(matmul(Tensor(hidden), target64.weights["lm_head"]).data, logits, atol=1e-12)


def test_incremental_matches_full(target64):
    toks = [3, 9, 1, 7, 2]
    full, _ = target64.forward(toks)
    cache = target64.new_cache()
    target64.forward(toks[:4], cache)
    last, _ = target64.forward(toks[4:], cache)
    assert np.max(np.abs(last[-1] - full[-1])) <= 1e-5


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 6))
def test_cache_equivalence_random(seed, n_prefix, n_new):
    rng = np.random.default_rng(seed)
    model = tiny_target(seed % 7, vocab=13, hidden=8, heads=2, layers=1, max_seq_len=32)
    toks = rng.integers(0, 13, n_prefix + n_new).tolist()
    full, _ = model.forward(toks)
    cache = model.new_cache()
    model.forward(toks[:n_prefix], cache)
    part, _ = model.forward(toks[n_prefix:], cache)
    assert np.max(np.abs(part - full[n_prefix:])) <= 1e-5


def test_causal_mask_equals_no_mask(target64):
    toks = [1, 5, 2, 8]
    a, _ = target64.forward(toks)
    b, _ = target64.forward(toks, mask=np.tril(np.ones((4, 4), dtype=bool)))
    assert np.array_equal(a, b)


def test_tree_nodes_match_path_chains(target64, rng):
    prefix = [2, 7, 1]
    for _ in range(5):
        n = int(rng.integers(1, 10))
        tree = TokenTree(rng.integers(0, 20, n), [int(rng.integers(-1, i)) for i in range(n)])
        cache = target64.new_cache()
        target64.forward(prefix, cache)
        for mask in (build_mask(tree), compress_mask(tree)):
            c = cache.copy()
            logits, _ = target64.forward(tree.tokens, c, mask=mask)
            for i in range(n):
                chain = prefix + [int(tree.tokens[j]) for j in tree.path(i)]
                ref, _ = target64.forward(chain)
                assert np.array_equal(np.argmax(logits[i]), np.argmax(ref[-1]))
                assert np.max(np.abs(logits[i] - ref[-1])) <= 1e-9


def test_capacity_error():
    model = tiny_target(max_seq_len=8)
    cache = model.new_cache()
    model.forward(list(range(6)), cache)
    with pytest.raises(CapacityError):
        model.forward([1, 2, 3], cache)
    with pytest.raises(CapacityError):
        model.forward(list(range(9)))


def test_vanilla_greedy_matches_no_cache_oracle(target64):
    prompt = [4, 2, 11]
    out = vanilla_decode(target64, prompt, 12)
    seq = list(prompt)
    ref = []
    for _ in range(12):
        logits, _ = target64.forward(seq)
        t = int(np.argmax(logits[-1]))
        ref.append(t)
        seq.append(t)
    assert out == ref


def test_vanilla_deterministic_and_empty(target64):
    assert vanilla_decode(target64, [1], 10) == vanilla_decode(target64, [1], 10)
    assert vanilla_decode(target64, [1], 0) == []
    a = vanilla_decode(target64, [1], 10, temperature=1.0, rng_seed=5)
    b = vanilla_decode(target64, [1], 10, temperature=1.0, rng_seed=5)
    assert a == b
    with pytest.raises(ValueError):
        vanilla_decode(target64, [], 3)


def test_argmax_tie_breaks_to_lowest_id():
    from treespec.target import select_token

    assert select_token(np.array([1.0, 3.0, 3.0, 0.0]), 0.0, None) == 1


def test_rollback_examples(target64):
    cache = target64.new_cache()
    target64.forward([1, 2, 3], cache)
    rollback_cache(cache, 3)
    assert cache.length == 3
    rollback_cache(cache, 0)
    a, _ = target64.forward([5, 6], cache)
    b, _ = target64.forward([5, 6], target64.new_cache())
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        rollback_cache(cache, 5)


def test_append_rollback_append_matches_straight_line(target64, rng):
    first = rng.integers(0, 20, 8).tolist()
    extra = rng.integers(0, 20, 3).tolist()
    cache = target64.new_cache()
    target64.forward(first, cache)
    rollback_cache(cache, 5)
    got, _ = target64.forward(extra, cache)
    ref, _ = target64.forward(first[:5] + extra)
    assert np.max(np.abs(got - ref[5:])) <= 1e-5


def test_keep_rows_compacts(target64):
    cache = target64.new_cache()
    target64.forward([1, 2], cache)
    tree = TokenTree([3, 4, 5], [-1, -1, 1])
    target64.forward([9] + tree.tokens.tolist(), cache,
                     mask=np.array([[1, 0, 0, 0], [1, 1, 0, 0], [1, 0, 1, 0], [1, 0, 1, 1]], dtype=bool))
    cache.keep_rows(2, [0, 2, 3])  # anchor, node 1, node 2
    got, _ = target64.forward([7], cache)
    ref, _ = target64.forward([1, 2, 9, 4, 5, 7])
    assert np.max(np.abs(got[-1] - ref[-1])) <= 1e-9


def test_forward_batch_matches_forward(target64, rng):
    toks = rng.integers(0, 20, (2, 6))
    logits, hidden = target64.forward_batch(toks)
    for b in range(2):
        lg, hd = target64.forward(toks[b])
        assert np.allclose(logits.data[b], lg, atol=1e-12) and np.allclose(hidden.data[b], hd, atol=1e-12)


def test_float32_default_dtype():
    m = TargetModel.random(TargetConfig(vocab_size=10, hidden_size=8, num_heads=2, num_layers=1, max_seq_len=16))
    logits, hidden = m.forward([1, 2])
    assert logits.dtype == np.float32 and hidden.dtype == np.float32
