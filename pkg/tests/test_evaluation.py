import math

import numpy as np
import pytest

from embmmt.errors import ConfigError, ContractError
from embmmt.evaluation import (
    WordScore,
    corpus_bleu,
    evaluate,
    fscore_by_frequency,
    format_mean_sd,
    word_fscore,
)


def fscore_oracle(hyps, refs):
    """Word-by-word recount straight from the sentence-presence definition."""
    out = {}
    for w in sorted({t for s in hyps + refs for t in s}):
        both = sum(1 for h, r in zip(hyps, refs) if w in h and w in r)
        nh = sum(1 for h in hyps if w in h)
        nr = sum(1 for r in refs if w in r)
        p = both / nh if nh else 0.0
        r = both / nr if nr else 0.0
        out[w] = 2 * p * r / (p + r) if p + r else 0.0
    return out


def random_corpus(rng, n):
    words = [f"w{i}" for i in range(12)]
    make = lambda: [words[i] for i in rng.integers(0, 12, size=rng.integers(1, 8))]
    return [make() for _ in range(n)], [make() for _ in range(n)]


# -- BLEU -------------------------------------------------------------------


def test_bleu_hand_value():
    # p1 = 1/4, p2..p4 smoothed to 1/6, 1/4, 1/2; hypothesis longer, no brevity penalty
    got = corpus_bleu([["the"] * 4], [["the", "cat"]])
    assert got == pytest.approx(100 * 192 ** -0.25, abs=1e-12)
    assert round(got, 2) == 26.86


def test_bleu_identity_is_100():
    rng = np.random.default_rng(0)
    hyps, _ = random_corpus(rng, 10)
    hyps = [h + ["a", "b", "c", "d"] for h in hyps]
    assert corpus_bleu(hyps, hyps) == pytest.approx(100.0)


def test_bleu_brevity_penalty():
    ref = ["a", "b", "c", "d", "e", "f", "g", "h"]
    got = corpus_bleu([ref[:4]], [ref])
    assert got == pytest.approx(100 * math.exp(1 - 8 / 4))


def test_bleu_permutation_invariant():
    rng = np.random.default_rng(1)
    hyps, refs = random_corpus(rng, 15)
    perm = rng.permutation(15)
    a = corpus_bleu(hyps, refs)
    b = corpus_bleu([hyps[i] for i in perm], [refs[i] for i in perm])
    assert a == pytest.approx(b, abs=1e-12)


def test_bleu_edge_cases():
    assert corpus_bleu([[]], [["a"]]) == 0.0
    assert corpus_bleu([["a", "b"]], [["a", "b"]]) == 0.0  # no 3- or 4-grams at all
    with pytest.raises(ContractError):
        corpus_bleu([], [])
    with pytest.raises(ContractError):
        corpus_bleu([["a"]], [])


# -- per-word F -------------------------------------------------------------


def test_word_fscore_hand_example():
    hyps = [["a", "dog"], ["a", "cat"], ["the", "dog"]]
    refs = [["a", "dog"], ["the", "cat"], ["the", "cat"]]
    scores = {r.token: r for r in word_fscore(hyps, refs)}
    # dog: in 2 outputs, 1 reference, 1 shared: p = 1/2, r = 1, f = 2/3
    assert scores["dog"].precision == 0.5 and scores["dog"].recall == 1.0
    assert scores["dog"].fscore == pytest.approx(2 / 3)


def test_word_fscore_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        hyps, refs = random_corpus(rng, int(rng.integers(1, 51)))
        got = {r.token: r.fscore for r in word_fscore(hyps, refs)}
        want = fscore_oracle(hyps, refs)
        assert got.keys() == want.keys()
        for w in want:
            assert got[w] == pytest.approx(want[w], abs=1e-12)


def test_word_fscore_sorted_with_frequencies():
    recs = word_fscore([["b", "a"]], [["a"]], {"a": 7})
    assert [r.token for r in recs] == ["a", "b"]
    assert recs[0].frequency == 7 and recs[1].frequency == 0
    assert recs[1].fscore == 0.0


# -- buckets ----------------------------------------------------------------


def test_buckets_cover_and_average():
    recs = [WordScore("a", 0, 0, 0, 0.2), WordScore("b", 1, 0, 0, 0.4),
            WordScore("c", 3, 0, 0, 0.6), WordScore("d", 4, 0, 0, 1.0),
            WordScore("e", 5000, 0, 0, 0.8)]
    buckets = fscore_by_frequency(recs)
    labels = [b.label for b in buckets]
    assert labels == ["0", "1", "2-4", "5-9", "10-99", "100-999", ">=1000"]
    by = {b.label: b for b in buckets}
    assert by["2-4"].count == 2 and by["2-4"].mean_f == pytest.approx(0.8)
    assert by[">=1000"].mean_f == pytest.approx(0.8)
    assert sum(b.count for b in buckets) == len(recs)


def test_bucket_edges_validated():
    with pytest.raises(ConfigError):
        fscore_by_frequency([], (5, 2))


def test_report_files(tmp_path):
    rep = evaluate([["a", "b", "c", "d"]], [["a", "b", "c", "d"]], {"a": 3})
    rep.write(tmp_path)
    assert (tmp_path / "summary.txt").read_text().startswith("sentences: 1\nBLEU: 100.00")
    rows = (tmp_path / "word_fscore.csv").read_text().splitlines()
    assert rows[0] == "token,frequency,precision,recall,fscore"
    assert rows[1] == "a,3,1.00,1.00,1.00"
    assert (tmp_path / "fscore_by_frequency.csv").exists()


# -- mean and sd ------------------------------------------------------------


def test_format_mean_sd():
    assert format_mean_sd([50.63, 51.0, 51.37]) == "51.00±.37"
    assert format_mean_sd([40.0, 42.0]) == "41.00±1.41"
    assert format_mean_sd([3.0]) == "3.00±.00"
