"""Corpora, text preprocessing, batching, and image feature files."""

from __future__ import annotations

import logging
import re
import struct
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

MAX_LENGTH = 100
DEFAULT_BATCH_SIZE = 32
DEFAULT_FEATURE_DIM = 2048
FEATURE_MAGIC = b"MMVF"

# Applied in order before tokenisation.
PUNCT_REPLACEMENTS: tuple[tuple[str, str], ...] = (
    ("‘", "'"),  # left single quote
    ("’", "'"),  # right single quote / apostrophe
    ("‚", "'"),  # single low-9 quote
    ("‛", "'"),  # single high-reversed-9 quote
    ("′", "'"),  # prime
    ("´", "'"),  # acute accent
    ("`", "'"),
    ("“", '"'),  # left double quote
    ("”", '"'),  # right double quote
    ("„", '"'),  # double low-9 quote
    ("‟", '"'),  # double high-reversed-9 quote
    ("«", '"'),  # guillemets
    ("»", '"'),
    ("″", '"'),  # double prime
    ("‐", "-"),  # hyphen
    ("‑", "-"),  # non-breaking hyphen
    ("‒", "-"),  # figure dash
    ("–", "-"),  # en dash
    ("—", "-"),  # em dash
    ("―", "-"),  # horizontal bar
    ("−", "-"),  # minus sign
    ("…", "..."),  # ellipsis
    (" ", " "),  # no-break space
    (" ", " "),  # narrow no-break space
    (" ", " "),  # thin space
)

# "..." stays one token; every other punctuation character is its own token
_TOKEN_RE = re.compile(r"\.\.\.|[^\W_]+|\S", re.UNICODE)


def normalize_punctuation(text: str) -> str:
    for src, dst in PUNCT_REPLACEMENTS:
        text = text.replace(src, dst)
    return text


def preprocess_text(line: str) -> list[str]:
    """Lowercase, normalise punctuation, and split punctuation from words."""
    text = unicodedata.normalize("NFC", line).lower()
    text = normalize_punctuation(text)
    return _TOKEN_RE.findall(text)


@dataclass
class ParallelCorpus:
    source: list[list[str]]
    target: list[list[str]]
    image_index: list[int] | None = None
    split: str = "train"

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise ContractError(
                f"{len(self.source)} source vs {len(self.target)} target sentences"
            )
        if self.image_index is not None and len(self.image_index) != len(self.source):
            raise ContractError("image index must have one entry per sentence pair")
        if self.split not in ("train", "val", "test"):
            raise ContractError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.source)


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def load_parallel(src_path, tgt_path, split: str = "train", image_index_path=None) -> ParallelCorpus:
    src = [preprocess_text(l) for l in read_lines(src_path)]
    tgt = [preprocess_text(l) for l in read_lines(tgt_path)]
    idx = load_image_index(image_index_path) if image_index_path else None
    return ParallelCorpus(src, tgt, idx, split)


def load_image_index(path) -> list[int]:
    out = []
    for n, line in enumerate(read_lines(path), 1):
        try:
            out.append(int(line.strip()))
        except ValueError:
            raise FormatError(f"{path}:{n}: not an integer: {line!r}") from None
    return out


def save_image_index(path, index: Sequence[int]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in index), encoding="utf-8")


def build_vocab(corpus: ParallelCorpus, max_size: int = 10000, side: str = "source") -> Vocabulary:
    if corpus.split != "train":
        raise ContractError("vocabularies are built from the training split only")
    return Vocabulary.build(corpus.source if side == "source" else corpus.target, max_size)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray  # (B, N) int
    src_mask: np.ndarray  # (B, N) float {0, 1}
    tgt: np.ndarray  # (B, M) int, bos ... eos
    tgt_mask: np.ndarray
    features: np.ndarray | None = None  # (B, F)
    indices: np.ndarray | None = None  # corpus positions

    @property
    def size(self) -> int:
        return self.src.shape[0]


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def _truncate(tokens: list, cap: int, where: str) -> list:
    if len(tokens) > cap:
        log.warning("%s sentence of %d tokens truncated to %d", where, len(tokens), cap)
        return tokens[:cap]
    return tokens


def encode_pairs(corpus: ParallelCorpus, vocab_src: Vocabulary, vocab_tgt: Vocabulary,
                 max_length: int = MAX_LENGTH) -> list[tuple[list[int], list[int]]]:
    pairs = []
    for src, tgt in zip(corpus.source, corpus.target):
        s = vocab_src.encode(_truncate(src, max_length, "source"))
        t = [BOS_ID] + vocab_tgt.encode(_truncate(tgt, max_length, "target")) + [EOS_ID]
        pairs.append((s, t))
    return pairs


def make_batches(
    corpus: ParallelCorpus,
    vocab_src: Vocabulary,
    vocab_tgt: Vocabulary,
    batch_size: int = DEFAULT_BATCH_SIZE,
    shuffle_seed: int | None = None,
    features: "VisualFeatureSet | None" = None,
    max_length: int = MAX_LENGTH,
    pool_factor: int = 20,
) -> list[Batch]:
    """Length-bucketed batches.

    With a seed, sentences are shuffled, then sorted by length inside pools of
    ``pool_factor * batch_size`` so batches hold similar lengths, and batch
    order is shuffled.  Without a seed the corpus order is kept.  Pairs with an
    empty source are dropped with a warning.
    """
    pairs = encode_pairs(corpus, vocab_src, vocab_tgt, max_length)
    order = [i for i, (s, _) in enumerate(pairs) if s]
    if len(order) < len(pairs):
        log.warning("dropped %d pairs with an empty source", len(pairs) - len(order))
    if features is not None and corpus.image_index is None:
        raise ContractError("features given but corpus has no image index")

    if shuffle_seed is None:
        chunks = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    else:
        rng = np.random.default_rng(shuffle_seed)
        order = [order[i] for i in rng.permutation(len(order))]
        pool = batch_size * pool_factor
        chunks = []
        for start in range(0, len(order), pool):
            block = sorted(order[start: start + pool], key=lambda i: (len(pairs[i][0]), len(pairs[i][1])))
            chunks.extend(block[i: i + batch_size] for i in range(0, len(block), batch_size))
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]

    batches = []
    for chunk in chunks:
        src, src_mask = pad_sequences([pairs[i][0] for i in chunk])
        tgt, tgt_mask = pad_sequences([pairs[i][1] for i in chunk])
        feats = None
        if features is not None:
            feats = features.features[[corpus.image_index[i] for i in chunk]]
        batches.append(Batch(src, src_mask, tgt, tgt_mask, feats, np.array(chunk)))
    return batches


# ---------------------------------------------------------------------------
# visual features


@dataclass
class VisualFeatureSet:
    features: np.ndarray  # (num_images, F)
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ContractError(f"features must be 2-D, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features contain non-finite values")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def save_visual_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    path = Path(path)
    if path.suffix == ".csv":
        np.savetxt(path, features, delimiter=",", fmt="%.9g")
        return
    count, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", count, dim))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def load_visual_features(path) -> VisualFeatureSet:
    """Read an ``MMVF`` binary feature file (or ``.csv``, one row per line)."""
    path = Path(path)
    if path.suffix == ".csv":
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
        return VisualFeatureSet(arr.astype(np.float64))
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * count * dim:
        raise FormatError(f"{path}: header says {count}x{dim} floats, body has {len(body) // 4}")
    arr = np.frombuffer(body, dtype="<f4").reshape(count, dim)
    return VisualFeatureSet(arr.astype(np.float64))


def debias_visual(features: VisualFeatureSet, train_indexes: Sequence[int]) -> VisualFeatureSet:
    """Subtract the training-image centroid from every image."""
    train_indexes = np.unique(np.asarray(train_indexes, dtype=np.int64))
    if train_indexes.size == 0:
        raise ContractError("debias_visual needs at least one training image")
    centroid = features.features[train_indexes].mean(axis=0)
    return VisualFeatureSet(features.features - centroid, centroid)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticSpec:
    vocab_size: int = 50
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    min_len: int = 3
    max_len: int = 8
    zipf: float = 1.0
    seed: int = 1
    feature_dim: int = 32
    noise: float = 0.05


@dataclass
class SyntheticTask:
    train: ParallelCorpus
    val: ParallelCorpus
    test: ParallelCorpus
    features: VisualFeatureSet
    mapping: dict[str, str] = field(default_factory=dict)

    def splits(self) -> dict[str, ParallelCorpus]:
        return {"train": self.train, "val": self.val, "test": self.test}


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    p = ranks ** (-exponent)
    return p / p.sum()


def source_words(n: int) -> list[str]:
    return [f"src{i:03d}" for i in range(n)]


def target_words(n: int) -> list[str]:
    return [f"tgt{i:03d}" for i in range(n)]


def generate_synthetic_task(spec: SyntheticSpec | None = None) -> SyntheticTask:
    """Token-substitution translation task with Zipfian token frequencies.

    Source word ``src{r}`` has frequency rank r.  Each maps to a target word
    through a fixed random bijection.  Each sentence owns one image whose
    feature is a fixed random projection of the source bag of words plus
    Gaussian noise.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    src_vocab = source_words(spec.vocab_size)
    tgt_vocab = target_words(spec.vocab_size)
    perm = rng.permutation(spec.vocab_size)
    mapping = {src_vocab[i]: tgt_vocab[perm[i]] for i in range(spec.vocab_size)}
    probs = zipf_probabilities(spec.vocab_size, spec.zipf)
    projection = rng.normal(size=(spec.vocab_size, spec.feature_dim)) / np.sqrt(spec.feature_dim)

    total = spec.n_train + spec.n_val + spec.n_test
    sentences, feats = [], np.empty((total, spec.feature_dim))
    for i in range(total):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        ids = rng.choice(spec.vocab_size, size=length, p=probs)
        sentences.append([src_vocab[j] for j in ids])
        bag = np.bincount(ids, minlength=spec.vocab_size) / length
        feats[i] = bag @ projection * np.sqrt(spec.vocab_size) + spec.noise * rng.normal(size=spec.feature_dim)

    def split(name, lo, hi):
        src = sentences[lo:hi]
        tgt = [[mapping[t] for t in s] for s in src]
        return ParallelCorpus(src, tgt, list(range(lo, hi)), name)

    a, b = spec.n_train, spec.n_train + spec.n_val
    return SyntheticTask(
        split("train", 0, a), split("val", a, b), split("test", b, total),
        VisualFeatureSet(feats), mapping,
    )


def synthetic_word_vectors(words: Sequence[str], dim: int, seed: int, n_extra: int = 100) -> dict[str, np.ndarray]:
    """Random stand-in for pretrained vectors: one Gaussian vector per word plus
    ``n_extra`` out-of-vocabulary words (so unknown-word averaging has data)."""
    rng = np.random.default_rng(seed)
    tokens = list(words) + [f"oov{i:04d}" for i in range(n_extra)]
    return {t: rng.normal(size=dim) for t in tokens}
