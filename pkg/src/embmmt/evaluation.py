"""Corpus BLEU, per-word F-score and frequency-bucketed aggregation."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError, ContractError

DEFAULT_BUCKET_EDGES = (1, 2, 5, 10, 100, 1000)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hypotheses, references, max_order: int = 4):
    """Pooled clipped matches and totals per order, plus hyp/ref lengths."""
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                max_order: int = 4) -> float:
    """Corpus-level BLEU-4 on a 0-100 scale, single reference per sentence.

    Smoothing: an order with zero matches uses precision 1 / (2 * total
    n-grams of that order).  An order with no hypothesis n-grams at all, or an
    empty hypothesis corpus, gives 0.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("corpus_bleu needs at least one hypothesis")
    matches, totals, c, r = bleu_statistics(hypotheses, references, max_order)
    if c == 0 or min(totals) == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if m > 0 else 1.0 / (2.0 * t)
        log_p += math.log(p) / max_order
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


@dataclass
class WordScore:
    token: str
    frequency: int
    precision: float
    recall: float
    fscore: float


def word_fscore(hypotheses, references, frequencies: Mapping[str, int] | None = None) -> list[WordScore]:
    """Sentence-presence precision/recall/F per word type.

    precision(w) = #sentences with w in both / #sentences with w in the output;
    recall(w) = #sentences with w in both / #sentences with w in the reference.
    An undefined ratio counts as 0.  Records are sorted by token.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    in_hyp, in_ref, in_both = Counter(), Counter(), Counter()
    for hyp, ref in zip(hypotheses, references):
        h, r = set(hyp), set(ref)
        in_hyp.update(h)
        in_ref.update(r)
        in_both.update(h & r)
    frequencies = frequencies or {}
    records = []
    for w in sorted(set(in_hyp) | set(in_ref)):
        p = in_both[w] / in_hyp[w] if in_hyp[w] else 0.0
        rc = in_both[w] / in_ref[w] if in_ref[w] else 0.0
        f = 2 * p * rc / (p + rc) if p + rc > 0 else 0.0
        records.append(WordScore(w, int(frequencies.get(w, 0)), p, rc, f))
    return records


@dataclass
class Bucket:
    label: str
    low: int
    high: int | None  # inclusive; None = unbounded
    mean_f: float
    count: int


def bucket_label(low: int, high: int | None) -> str:
    if high is None:
        return f">={low}"
    return str(low) if low == high else f"{low}-{high}"


def fscore_by_frequency(records: Sequence[WordScore],
                        edges: Sequence[int] = DEFAULT_BUCKET_EDGES) -> list[Bucket]:
    """Mean F per training-frequency bucket.

    ``edges`` are increasing lower bounds; bucket i covers
    [edges[i], edges[i+1] - 1] and the last is open-ended.  Words below the
    first edge (unseen in training) get their own leading bucket.
    """
    edges = list(edges)
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] < 0:
        raise ConfigError(f"bucket edges must be strictly increasing and non-negative: {edges}")
    spans = [(lo, edges[i + 1] - 1 if i + 1 < len(edges) else None) for i, lo in enumerate(edges)]
    if edges[0] > 0:
        spans.insert(0, (0, edges[0] - 1))
    groups: list[list[float]] = [[] for _ in spans]
    for rec in records:
        for i, (lo, hi) in enumerate(spans):
            if rec.frequency >= lo and (hi is None or rec.frequency <= hi):
                groups[i].append(rec.fscore)
                break
    out = []
    for (lo, hi), fs in zip(spans, groups):
        mean = sum(fs) / len(fs) if fs else 0.0
        out.append(Bucket(bucket_label(lo, hi), lo, hi, mean, len(fs)))
    return out


@dataclass
class EvaluationReport:
    bleu: float
    words: list[WordScore]
    buckets: list[Bucket]
    sentences: int

    def summary(self) -> str:
        lines = [f"sentences: {self.sentences}", f"BLEU: {self.bleu:.2f}", "F-score by training frequency:"]
        for b in self.buckets:
            lines.append(f"  {b.label:>10}  words={b.count:<5d} F={b.mean_f:.2f}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "word_fscore.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["token", "frequency", "precision", "recall", "fscore"])
            for r in self.words:
                w.writerow([r.token, r.frequency, f"{r.precision:.2f}", f"{r.recall:.2f}", f"{r.fscore:.2f}"])
        with open(out / "fscore_by_frequency.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "low", "high", "words", "mean_fscore"])
            for b in self.buckets:
                w.writerow([b.label, b.low, "" if b.high is None else b.high, b.count, f"{b.mean_f:.2f}"])
        (out / "summary.txt").write_text(self.summary() + "\n", encoding="utf-8")


def evaluate(hypotheses, references, frequencies: Mapping[str, int] | None = None,
             edges: Sequence[int] = DEFAULT_BUCKET_EDGES) -> EvaluationReport:
    words = word_fscore(hypotheses, references, frequencies)
    return EvaluationReport(corpus_bleu(hypotheses, references), words,
                            fscore_by_frequency(words, edges), len(hypotheses))


def format_mean_sd(values: Sequence[float]) -> str:
    """'51.00±.37' style: mean to 2 places, sample sd with the leading zero dropped."""
    values = list(values)
    mean = sum(values) / len(values)
    sd = 0.0
    if len(values) > 1:
        sd = math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1))
    sd_text = f"{sd:.2f}"
    if sd_text.startswith("0."):
        sd_text = sd_text[1:]
    return f"{mean:.2f}±{sd_text}"
