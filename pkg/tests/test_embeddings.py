import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embmmt.embeddings import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    DEFAULT_DIM,
    DEFAULT_TOP_K,
    EmbeddingTable,
    Vocabulary,
    assemble_table,
    build_unknown_embedding,
    debias_all_but_top,
    distance,
    load_word_vectors,
    nearest_neighbor,
    nearest_neighbors,
    save_word_vectors,
)
from embmmt.errors import ContractError, FormatError


# -- oracles ---------------------------------------------------------------


def svd_debias_oracle(X, k):
    """Mean-centre, then project out the top-k right singular vectors."""
    mu = X.mean(axis=0)
    C = X - mu
    if k == 0:
        return C
    _, _, vt = np.linalg.svd(C, full_matrices=False)
    U = vt[:k]
    return C - C @ U.T @ U


def scan_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return 1.0 - dot / (na * nb)


def scan_nearest(query, table, skip=(PAD_ID, BOS_ID)):
    best, best_d = None, math.inf
    for i, row in enumerate(table):
        if i in skip or not any(row):
            continue
        d = scan_cosine(query, row)
        if d < best_d - 1e-12:
            best, best_d = i, d
    return best


# -- vocabulary ------------------------------------------------------------


def test_vocab_reserved_and_capacity():
    v = Vocabulary.build([["a", "a", "b"]], max_size=5)
    assert v.itos == ["<pad>", "<unk>", "<bos>", "<eos>", "a", "b"][:5]
    v = Vocabulary.build([["a", "a", "b"]], max_size=5)
    assert "a" in v and len(v) == 5


def test_vocab_lexicographic_tie():
    v = Vocabulary.build([["y", "x"]], max_size=5)
    assert v.itos[4] == "x" and "y" not in v


def test_vocab_encode_decode_roundtrip():
    v = Vocabulary.build([["c", "a", "b", "a"]])
    toks = ["a", "b", "c"]
    assert v.decode(v.encode(toks)) == toks
    assert v.encode(["zzz"]) == [UNK_ID]
    assert v.frequency("a") == 2


# -- file format -----------------------------------------------------------


def test_load_two_entries(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("a 1.0 0.0\nb 0.0 1.0\n")
    table = load_word_vectors(p, 2)
    assert list(table) == ["a", "b"]
    np.testing.assert_array_equal(table["b"], [0.0, 1.0])


def test_header_skipped(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("2 3\na 1 2 3\nb 4 5 6\n")
    assert len(load_word_vectors(p, 3)) == 2


def test_duplicate_keeps_first(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("a 1 2\na 3 4\n")
    np.testing.assert_array_equal(load_word_vectors(p, 2)["a"], [1, 2])


def test_dimension_mismatch_reports_line(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("a 1 2\nb 1 2 3\n")
    with pytest.raises(FormatError, match=":2:"):
        load_word_vectors(p, 2)


def test_empty_file_rejected(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("")
    with pytest.raises(FormatError):
        load_word_vectors(p, 2)


def test_default_dim_is_300():
    assert DEFAULT_DIM == 300 and DEFAULT_TOP_K == 5


def test_save_roundtrip_nine_digits(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 4))
    toks = [f"w{i}" for i in range(5)]
    save_word_vectors(tmp_path / "o.txt", toks, X)
    back = load_word_vectors(tmp_path / "o.txt", 4)
    again = np.stack([back[t] for t in toks])
    np.testing.assert_allclose(again, X, rtol=1e-8)
    save_word_vectors(tmp_path / "o2.txt", toks, again)
    assert (tmp_path / "o.txt").read_text() == (tmp_path / "o2.txt").read_text()


# -- unknown-word vector and assembly ----------------------------------------


def test_unknown_single_oov():
    vocab = Vocabulary(["a"])
    raw = {"a": np.array([1.0, 2.0]), "z": np.array([3.0, 4.0])}
    np.testing.assert_array_equal(build_unknown_embedding(raw, vocab), [3.0, 4.0])


def test_unknown_two_oov():
    vocab = Vocabulary(["a"])
    raw = {"a": np.array([9.0, 9.0]), "x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0])}
    np.testing.assert_allclose(build_unknown_embedding(raw, vocab), [0.5, 0.5])


def test_unknown_random_vs_bruteforce():
    rng = np.random.default_rng(4)
    raw = {f"w{i}": rng.normal(size=6) for i in range(50)}
    vocab = Vocabulary([f"w{i}" for i in range(10)])
    acc = np.zeros(6)
    for i in range(10, 50):
        acc += raw[f"w{i}"]
    np.testing.assert_allclose(build_unknown_embedding(raw, vocab), acc / 40, atol=1e-12)


def test_unknown_fallback_all_in_vocab():
    vocab = Vocabulary(["a", "b"])
    raw = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    np.testing.assert_allclose(build_unknown_embedding(raw, vocab), [0.5, 0.5])


def test_assemble_pretrained():
    vocab = Vocabulary(["a", "b"])
    raw = {"a": np.array([1.0, 2.0]), "c": np.array([5.0, 5.0])}
    unk = build_unknown_embedding(raw, vocab)
    t = assemble_table(raw, vocab, unk, "pretrained")
    np.testing.assert_array_equal(t.vectors[vocab.stoi["a"]], [1.0, 2.0])
    np.testing.assert_array_equal(t.vectors[vocab.stoi["b"]], unk)
    np.testing.assert_array_equal(t.vectors[UNK_ID], unk)
    np.testing.assert_array_equal(t.vectors[PAD_ID], 0.0)
    again = assemble_table(raw, vocab, unk, "pretrained")
    np.testing.assert_array_equal(t.vectors, again.vectors)


def test_assemble_random_reproducible():
    vocab = Vocabulary(["a", "b", "c"])
    t1 = assemble_table(None, vocab, init_mode="random", dim=4, rng=np.random.default_rng(3))
    t2 = assemble_table(None, vocab, init_mode="random", dim=4, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(t1.vectors, t2.vectors)
    assert np.all(np.abs(t1.vectors) <= 0.1)
    np.testing.assert_array_equal(t1.vectors[PAD_ID], 0.0)


# -- all-but-the-top -------------------------------------------------------


def test_debias_k0_centres():
    X = np.random.default_rng(0).normal(size=(30, 5)) + 3.0
    out, rep = debias_all_but_top(X, 0)
    assert np.linalg.norm(out.mean(axis=0)) <= 1e-10
    assert rep.directions.shape == (0, 5)


def test_debias_rank_one_annihilated():
    rng = np.random.default_rng(1)
    p, u = rng.normal(size=4), rng.normal(size=4)
    X = p + rng.normal(size=(12, 1)) * u
    out, _ = debias_all_but_top(X, 1)
    assert np.max(np.abs(out)) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("k", [0, 1, 2])
def test_debias_matches_svd_oracle(seed, k):
    X = np.random.default_rng(seed).normal(size=(40, 6)) * np.arange(1, 7)
    out, _ = debias_all_but_top(X, k)
    assert np.max(np.abs(out - svd_debias_oracle(X, k))) <= 1e-8


def test_debias_postconditions_and_reapply():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6)) + 2.0
    out, rep = debias_all_but_top(X, 2)
    assert np.linalg.norm(out.mean(axis=0)) <= 1e-8
    assert np.max(np.abs(out @ rep.directions.T)) <= 1e-6
    np.testing.assert_allclose(rep.directions @ rep.directions.T, np.eye(2), atol=1e-8)
    assert np.max(np.abs(rep.apply(out, recenter=True) - out)) <= 1e-6


def test_refitting_removes_further_directions():
    # a second fit finds the next k directions, so only k=0 is a fixed point
    X = np.random.default_rng(8).normal(size=(40, 6)) * np.arange(1, 7)
    once, _ = debias_all_but_top(X, 0)
    np.testing.assert_allclose(debias_all_but_top(once, 0)[0], once, atol=1e-12)
    once, _ = debias_all_but_top(X, 2)
    twice, _ = debias_all_but_top(once, 2)
    assert np.max(np.abs(twice - once)) > 1e-3


def test_debias_table_keeps_pad_zero_and_excludes_it():
    rng = np.random.default_rng(2)
    vocab = Vocabulary([f"w{i}" for i in range(20)])
    vecs = rng.normal(size=(len(vocab), 5)) + 1.0
    vecs[PAD_ID] = 0.0
    out, rep = debias_all_but_top(EmbeddingTable(vecs, vocab), 2)
    np.testing.assert_array_equal(out.vectors[PAD_ID], 0.0)
    np.testing.assert_allclose(rep.mean, vecs[1:].mean(axis=0))
    assert np.linalg.norm(out.vectors[1:].mean(axis=0)) <= 1e-8


def test_debias_k_too_large():
    with pytest.raises(ContractError):
        debias_all_but_top(np.ones((3, 5)), 3)


# -- distance and search ---------------------------------------------------


def test_distance_values():
    x = np.array([0.3, -2.0, 1.0])
    assert distance(x, x) == pytest.approx(0.0, abs=1e-15)
    assert distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)
    assert distance([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(2.0)
    with pytest.raises(ContractError):
        distance([0.0, 0.0], [1.0, 0.0])


def test_nearest_exact_row():
    table = np.random.default_rng(0).normal(size=(20, 8))
    i, d = nearest_neighbor(table[7], table)
    assert i == 7 and d == pytest.approx(0.0, abs=1e-12)


def test_nearest_excludes_pad_and_bos_but_not_unk_eos():
    table = np.eye(5)
    assert nearest_neighbor(table[BOS_ID], table)[0] != BOS_ID
    assert nearest_neighbor(table[EOS_ID], table)[0] == EOS_ID
    assert nearest_neighbor(table[UNK_ID], table)[0] == UNK_ID
    assert nearest_neighbor(table[BOS_ID], table, exclude_reserved=False)[0] == BOS_ID


def test_nearest_ties_lowest_id():
    table = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [1, 1.0], [1, 1.0]])
    assert nearest_neighbor(np.array([2.0, 2.0]), table)[0] == 3


def test_nearest_vs_linear_scan():
    rng = np.random.default_rng(11)
    table = rng.normal(size=(500, 16))
    table[PAD_ID] = 0.0
    queries = rng.normal(size=(1000, 16))
    ids, _ = nearest_neighbors(queries, table)
    expected = [scan_nearest(q, table) for q in queries[:200]]
    assert list(ids[:200]) == expected


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_nearest_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(30, 5))
    q = rng.normal(size=5)
    assert nearest_neighbor(q, table)[0] == nearest_neighbor(scale * q, table)[0]


def test_zero_query_is_equidistant():
    table = np.random.default_rng(5).normal(size=(6, 3))
    ids, d = nearest_neighbors(np.zeros((1, 3)), table)
    assert ids[0] == UNK_ID and d[0] == pytest.approx(1.0)
