"""Word vectors: loading, vocabulary alignment, all-but-the-top, and search."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

DEFAULT_DIM = 300
DEFAULT_TOP_K = 5
# distances closer than this to the minimum count as a tie (lowest id wins)
TIE_TOLERANCE = 1e-12


class Vocabulary:
    """Token <-> id map; reserved tokens hold ids 0..3."""

    def __init__(self, tokens: Sequence[str], freqs: Mapping[str, int] | None = None):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        freqs = freqs or {}
        self.freqs = {t: int(freqs.get(t, 0)) for t in tokens}
        if any(f < 0 for f in self.freqs.values()):
            raise ContractError("frequencies must be non-negative")

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], max_size: int = 10000) -> "Vocabulary":
        """Keep the ``max_size - 4`` most frequent tokens; ties go to the
        lexicographically smaller token."""
        counts = Counter(tok for sent in sentences for tok in sent)
        for r in RESERVED:
            counts.pop(r, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [t for t, _ in ranked[: max(0, max_size - len(RESERVED))]]
        return cls(list(RESERVED) + kept, counts)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.freqs == other.freqs

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def frequency(self, token: str) -> int:
        return self.freqs.get(token, 0)

    def to_dict(self) -> dict:
        return {"tokens": self.itos, "freqs": [self.freqs[t] for t in self.itos]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(d["tokens"], dict(zip(d["tokens"], d["freqs"])))


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    vocab: Vocabulary
    fixed: bool = False

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.vocab):
            raise ContractError(
                f"table has {self.vectors.shape[0]} rows for a vocabulary of {len(self.vocab)}"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("embedding table contains non-finite values")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class DebiasReport:
    mean: np.ndarray
    directions: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def apply(self, vectors: np.ndarray, skip_rows: Sequence[int] = (), recenter: bool = False) -> np.ndarray:
        """Centre and remove the fitted directions.

        With ``recenter`` the rows are centred on their own mean (skipped rows
        excluded) instead of the stored one, which makes the map idempotent.
        """
        if recenter:
            keep = np.ones(len(vectors), dtype=bool)
            keep[list(skip_rows)] = False
            out = vectors - vectors[keep].mean(axis=0)
        else:
            out = vectors - self.mean
        if len(self.directions):
            out = out - (out @ self.directions.T) @ self.directions
        if len(skip_rows):
            out[list(skip_rows)] = 0.0
        return out

    def summary(self) -> str:
        lines = [f"mean norm: {np.linalg.norm(self.mean):.6f}",
                 f"removed directions: {len(self.directions)}"]
        for i, ev in enumerate(self.explained_variance, 1):
            lines.append(f"  u{i}: variance {ev:.6f}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# text vector files


def load_word_vectors(path, expected_dim: int = DEFAULT_DIM) -> dict[str, np.ndarray]:
    """Read a whitespace-separated vector file (word2vec/fastText text format).

    A first line made of exactly two integers is treated as a count/dim header.
    Duplicate tokens keep their first vector.
    """
    table: dict[str, np.ndarray] = {}
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.lstrip("-").isdigit() for p in parts):
                continue
            token, values = parts[0], parts[1:]
            if len(values) != expected_dim:
                raise FormatError(
                    f"{path}:{lineno}: expected {expected_dim} values, got {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if token in table:
                duplicates += 1
                continue
            table[token] = vec
    if not table:
        raise FormatError(f"{path}: no word vectors found")
    if duplicates:
        log.warning("%s: %d duplicate tokens ignored", path, duplicates)
    return table


def save_word_vectors(path, tokens: Sequence[str], vectors: np.ndarray, header: bool = True) -> None:
    """Write vectors in the text format, 9 significant digits per value."""
    vectors = np.asarray(vectors)
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"{len(tokens)} {vectors.shape[1]}\n")
        for tok, row in zip(tokens, vectors):
            fh.write(tok + " " + " ".join(f"{v:.9g}" for v in row) + "\n")


def table_to_raw(table: EmbeddingTable) -> dict[str, np.ndarray]:
    return {t: table.vectors[i] for i, t in enumerate(table.vocab.itos)}


# ---------------------------------------------------------------------------
# alignment


def build_unknown_embedding(raw_table: Mapping[str, np.ndarray], vocab: Vocabulary) -> np.ndarray:
    """Mean vector of the pretrained words the vocabulary does not contain.

    Falls back to the mean of every pretrained vector when all of them are
    in the vocabulary.
    """
    if not raw_table:
        raise ContractError("raw table is empty")
    oov = [v for t, v in raw_table.items() if t not in vocab]
    pool = oov if oov else list(raw_table.values())
    return np.mean(np.stack(pool), axis=0)


def assemble_table(
    raw_table: Mapping[str, np.ndarray] | None,
    vocab: Vocabulary,
    unk_vector: np.ndarray | None = None,
    init_mode: str = "pretrained",
    dim: int | None = None,
    rng: np.random.Generator | None = None,
    fixed: bool = False,
) -> EmbeddingTable:
    """Build the V x D matrix for ``vocab``.

    ``pretrained``: copy matching rows, use ``unk_vector`` for missing tokens;
    bos/eos draw random rows (they have no pretrained counterpart).
    ``random``: uniform(-0.1, 0.1).  The pad row is zero in both modes.
    """
    if init_mode not in ("pretrained", "random"):
        raise ContractError(f"init_mode must be 'pretrained' or 'random', got {init_mode!r}")
    if dim is None:
        if not raw_table:
            raise ContractError("dim is required when no raw table is given")
        dim = len(next(iter(raw_table.values())))
    rng = rng if rng is not None else np.random.default_rng(0)
    V = len(vocab)
    if init_mode == "random":
        vectors = rng.uniform(-0.1, 0.1, size=(V, dim))
    else:
        if raw_table is None or unk_vector is None:
            raise ContractError("pretrained mode needs raw_table and unk_vector")
        vectors = np.empty((V, dim))
        for i, tok in enumerate(vocab.itos):
            vectors[i] = raw_table[tok] if tok in raw_table else unk_vector
        for i in (BOS_ID, EOS_ID):
            if vocab.itos[i] not in raw_table:
                vectors[i] = rng.uniform(-0.1, 0.1, size=dim)
    vectors[PAD_ID] = 0.0
    return EmbeddingTable(vectors, vocab, fixed)


# ---------------------------------------------------------------------------
# all-but-the-top


def top_principal_directions(centered: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenvectors of the D x D covariance, sign-fixed so the largest
    component of each is positive."""
    if k == 0:
        return np.zeros((0, centered.shape[1])), np.zeros(0)
    cov = centered.T @ centered / centered.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    dirs = evecs[:, order].T
    for row in dirs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return dirs, evals[order]


def debias_all_but_top(
    table: EmbeddingTable | np.ndarray, k: int = DEFAULT_TOP_K, skip_rows: Sequence[int] | None = None
):
    """Remove the mean vector and the top-k principal directions.

    Rows in ``skip_rows`` (the pad row for an :class:`EmbeddingTable`) are left
    out of the statistics and set to zero.  Returns ``(debiased, report)`` of
    the same kind as the input.
    """
    is_table = isinstance(table, EmbeddingTable)
    vectors = table.vectors if is_table else np.asarray(table, dtype=np.float64)
    if skip_rows is None:
        skip_rows = (PAD_ID,) if is_table else ()
    keep = np.ones(len(vectors), dtype=bool)
    keep[list(skip_rows)] = False
    n = int(keep.sum())
    if k < 0 or k >= n:
        raise ContractError(f"debias: need 0 <= k < number of rows ({n}), got k={k}")
    rows = vectors[keep]
    mu = rows.mean(axis=0)
    dirs, ev = top_principal_directions(rows - mu, k)
    report = DebiasReport(mu, dirs, ev)
    out = report.apply(vectors, skip_rows)
    if is_table:
        return EmbeddingTable(out, table.vocab, table.fixed), report
    return out, report


# ---------------------------------------------------------------------------
# distance and search


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"distance: dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("distance: zero-norm vector")
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def euclidean_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, float) - np.asarray(b, float)))


def negative_dot(a, b) -> float:
    return float(-np.dot(a, b))


DISTANCES = {"cosine": cosine_distance, "euclidean": euclidean_distance, "dot": negative_dot}

distance = cosine_distance


def pairwise_distances(queries: np.ndarray, table: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """(Q, V) matrix of distances.

    Under cosine, zero-norm table rows get +inf and a zero-norm query sits at
    distance 1 from every other row.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    table = np.asarray(table, dtype=np.float64)
    if queries.shape[1] != table.shape[1]:
        raise ContractError(f"query dim {queries.shape[1]} != table dim {table.shape[1]}")
    if metric == "cosine":
        qn = np.linalg.norm(queries, axis=1, keepdims=True)
        qn[qn == 0] = 1.0
        tn = np.linalg.norm(table, axis=1)
        safe = np.where(tn == 0, 1.0, tn)
        d = 1.0 - (queries / qn) @ (table / safe[:, None]).T
        d[:, tn == 0] = np.inf
        return d
    if metric == "euclidean":
        diff = queries[:, None, :] - table[None, :, :]
        return np.sqrt((diff**2).sum(-1))
    if metric == "dot":
        return -(queries @ table.T)
    raise ContractError(f"unknown distance {metric!r}")


def eligible_mask(vocab_size: int, exclude_reserved: bool = True) -> np.ndarray:
    mask = np.ones(vocab_size, dtype=bool)
    if exclude_reserved:
        mask[[PAD_ID, BOS_ID]] = False
    return mask


def argmin_lowest(d: np.ndarray) -> np.ndarray:
    """Row-wise argmin treating values within TIE_TOLERANCE as ties."""
    d = np.atleast_2d(d)
    best = d.min(axis=1, keepdims=True)
    return np.argmax(d <= best + TIE_TOLERANCE, axis=1)


def nearest_neighbors(
    queries: np.ndarray, table: np.ndarray, exclude_reserved: bool = True, metric: str = "cosine"
) -> tuple[np.ndarray, np.ndarray]:
    """Batched nearest neighbour; returns (ids, distances)."""
    d = pairwise_distances(queries, table, metric)
    d[:, ~eligible_mask(len(table), exclude_reserved)] = np.inf
    ids = argmin_lowest(d)
    return ids, d[np.arange(len(ids)), ids]


def nearest_neighbor(query, table, exclude_reserved: bool = True, metric: str = "cosine"):
    """Id of the eligible row closest to ``query`` and its distance.

    pad and bos are skipped when ``exclude_reserved``; ties go to the lowest id.
    """
    if isinstance(table, EmbeddingTable):
        table = table.vectors
    ids, dists = nearest_neighbors(np.asarray(query)[None, :], table, exclude_reserved, metric)
    return int(ids[0]), float(dists[0])
