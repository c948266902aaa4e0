import numpy as np
import pytest

from treespec.corpus import ByteTokenizer, gen_corpus, markov_source, read_corpus, write_corpus


def test_same_seed_same_corpus():
    a, _ = gen_corpus("markov", 3, vocab_size=10, length=500)
    b, _ = gen_corpus("markov", 3, vocab_size=10, length=500)
    c, _ = gen_corpus("markov", 4, vocab_size=10, length=500)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("kw", [{}, {"support": 2}, {"order1_weight": 0.3}, {"support": 100}])
def test_transition_rows_sum_to_one(kw):
    src = markov_source(12, np.random.default_rng(0), **kw)
    assert np.allclose(src.transitions.sum(-1), 1.0) and np.all(src.transitions >= 0)


def test_sampled_conditionals_match_transitions():
    ids, src = gen_corpus("markov", 1, vocab_size=4, length=1_000_000, support=3)
    counts = np.zeros((4, 4, 4))
    np.add.at(counts, (ids[:-2], ids[1:-1], ids[2:]), 1)
    seen = counts.sum(-1) > 0
    freq = counts[seen] / counts[seen].sum(-1, keepdims=True)
    assert np.max(np.abs(freq - src.transitions[seen])) < 0.02


def test_ids_file_roundtrip(tmp_path):
    ids = np.arange(100) % 37
    write_corpus(tmp_path / "c.txt", ids)
    assert np.array_equal(read_corpus(tmp_path / "c.txt"), ids)


def test_bytes_ingestion(tmp_path):
    (tmp_path / "a.txt").write_text("héllo\n")
    ids, src = gen_corpus("text", paths=[tmp_path / "a.txt"])
    assert src is None and ByteTokenizer().decode(ids) == "héllo\n".encode()
    assert np.array_equal(read_corpus(tmp_path / "a.txt"), ids)


def test_tokenizer_roundtrip_and_specials():
    tok = ByteTokenizer(specials=("<eos>",))
    assert tok.vocab_size == 257
    ids = tok.encode("a b")
    assert tok.decode(ids + [256]) == b"a b"


def test_unknown_kind():
    with pytest.raises(ValueError):
        gen_corpus("zipf")
