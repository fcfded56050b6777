"""Multitask training loop, ablation matrix and multi-seed harness."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import ParallelCorpus, VisualFeatureSet, debias_visual, make_batches
from .embeddings import (
    DEFAULT_TOP_K,
    DebiasReport,
    EmbeddingTable,
    Vocabulary,
    assemble_table,
    build_unknown_embedding,
    debias_all_but_top,
)
from .errors import ConfigError
from .evaluation import corpus_bleu, format_mean_sd
from .losses import LossConfig
from .model import ModelConfig, MultimodalTranslator, canonical_json

log = logging.getLogger(__name__)

SCHEDULES = ("joint", "alternate")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 1
    lr: float = 4e-4
    clip_norm: float = 1.0
    vocab_size: int = 10000
    top_k: int = DEFAULT_TOP_K
    visual_debias: bool = True
    validation_interval: int = 1
    patience: int = 10
    schedule: str = "joint"
    max_decode_len: int = 100
    max_length: int = 100

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.validation_interval <= 0:
            raise ConfigError("epochs >= 0, batch_size > 0 and validation_interval > 0 required")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# Settings for the synthetic substitution task: smaller network and a larger
# step size than the full-scale defaults so 50 epochs fit in a few minutes.
TOY_MODEL_OVERRIDES = {"emb_dim": 64, "enc_hidden": 128, "dec_hidden": 128, "latent_dim": 32}
TOY_TRAIN_OVERRIDES = {"lr": 3e-3, "max_decode_len": 20}


def config_hash(*configs) -> str:
    blob = canonical_json([asdict(c) for c in configs])
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_t: float | None
    loss_v: float | None
    val_bleu: float | None
    seconds: float
    seed: int
    config_hash: str


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_bleu: float = float("-inf")
    max_post_clip_norm: float = 0.0

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def val_bleus(self) -> list[float | None]:
        return [r.val_bleu for r in self.records]

    def deterministic_view(self) -> list[dict]:
        """Records without wall-clock fields, for reproducibility checks."""
        return [{k: v for k, v in asdict(r).items() if k != "seconds"} for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            return cls([EpochRecord(**json.loads(line)) for line in fh if line.strip()])


@dataclass
class ExperimentData:
    train: ParallelCorpus
    val: ParallelCorpus
    test: ParallelCorpus | None = None
    features: VisualFeatureSet | None = None
    src_vectors: Mapping[str, np.ndarray] | None = None
    tgt_vectors: Mapping[str, np.ndarray] | None = None


@dataclass
class Prepared:
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    src_table: EmbeddingTable | None
    tgt_table: EmbeddingTable | None
    features: VisualFeatureSet | None
    reports: dict[str, DebiasReport] = field(default_factory=dict)


def prepare_table(raw, vocab: Vocabulary, init_mode: str, dim: int, top_k: int,
                  rng: np.random.Generator) -> tuple[EmbeddingTable | None, DebiasReport | None]:
    """Pretrained: align, fill unknowns with the OOV mean, then debias.
    Random: ``None`` (the model initialises it)."""
    if init_mode == "random":
        return None, None
    if raw is None:
        raise ConfigError("pretrained initialisation requested but no word vectors given")
    unk = build_unknown_embedding(raw, vocab)
    table = assemble_table(raw, vocab, unk, "pretrained", dim, rng)
    if table.dim != dim:
        raise ConfigError(f"word vectors have dim {table.dim}, model expects {dim}")
    return debias_all_but_top(table, top_k)


def prepare_features(features: VisualFeatureSet | None, train: ParallelCorpus,
                     debias: bool) -> VisualFeatureSet | None:
    if features is None:
        return None
    if not debias:
        return VisualFeatureSet(features.features.copy(), None)
    return debias_visual(features, train.image_index)


def prepare(data: ExperimentData, model_config: ModelConfig, train_config: TrainConfig) -> Prepared:
    if model_config.multimodal and (data.features is None or data.train.image_index is None):
        raise ConfigError("multimodal training needs visual features and an image index")
    rng = ad.make_rng(train_config.seed + 7919)
    src_vocab = Vocabulary.build(data.train.source, train_config.vocab_size)
    tgt_vocab = Vocabulary.build(data.train.target, train_config.vocab_size)
    src_table, src_rep = prepare_table(data.src_vectors, src_vocab, model_config.encoder_init,
                                       model_config.emb_dim, train_config.top_k, rng)
    tgt_table, tgt_rep = prepare_table(data.tgt_vectors, tgt_vocab, model_config.decoder_init,
                                       model_config.emb_dim, train_config.top_k, rng)
    feats = prepare_features(data.features, data.train, train_config.visual_debias) if model_config.multimodal else None
    reports = {k: v for k, v in (("source", src_rep), ("target", tgt_rep)) if v is not None}
    return Prepared(src_vocab, tgt_vocab, src_table, tgt_table, feats, reports)


@dataclass
class StepResult:
    loss: float
    loss_t: float | None
    loss_v: float | None
    clip_factor: float
    post_clip_norm: float


def train_step(model: MultimodalTranslator, batch, loss_config: LossConfig, state: ad.AdamState,
               clip_norm: float = 1.0, rng=None, alternate: str | None = None) -> StepResult:
    params = model.trainable()
    for p in params.values():
        p.zero_grad()
    loss, loss_t, loss_v = model.losses(batch, loss_config, training=True, rng=rng, alternate=alternate)
    ad.backward(loss)
    factor = ad.clip_grad_norm(params.values(), clip_norm)
    post = ad.global_grad_norm(params.values())
    ad.adam_step(params, state)
    return StepResult(loss.item(), None if loss_t is None else loss_t.item(),
                      None if loss_v is None else loss_v.item(), factor, post)


def corpus_bleu_of(model: MultimodalTranslator, corpus: ParallelCorpus, max_len: int = 100) -> float:
    hyps = model.translate_batch(corpus.source, max_len)
    return corpus_bleu(hyps, corpus.target)


def train(train_config: TrainConfig, model_config: ModelConfig, data: ExperimentData,
          loss_config: LossConfig | None = None, prepared: Prepared | None = None):
    """Train with early stopping on validation BLEU.

    Returns ``(model, log)``; the model holds the best-validation parameters.
    """
    loss_config = loss_config or LossConfig()
    prepared = prepared or prepare(data, model_config, train_config)
    cfg = replace(model_config, src_vocab_size=len(prepared.src_vocab),
                  tgt_vocab_size=len(prepared.tgt_vocab))
    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    init_rng = np.random.Generator(np.random.Philox(seeds[0]))
    drop_rng = np.random.Generator(np.random.Philox(seeds[1]))
    model = MultimodalTranslator.create(cfg, prepared.src_vocab, prepared.tgt_vocab, init_rng,
                                        prepared.src_table, prepared.tgt_table)
    state = ad.AdamState.create(model.trainable(), lr=train_config.lr)
    chash = config_hash(train_config, cfg, loss_config)
    tlog = TrainLog()
    best = model.snapshot()
    stale = 0
    feats = prepared.features if cfg.multimodal else None
    for epoch in range(1, train_config.epochs + 1):
        start = time.perf_counter()
        batches = make_batches(data.train, prepared.src_vocab, prepared.tgt_vocab,
                               train_config.batch_size, train_config.seed * 100003 + epoch,
                               feats, train_config.max_length)
        totals = {"loss": [], "loss_t": [], "loss_v": []}
        for i, batch in enumerate(batches):
            alternate = None
            if train_config.schedule == "alternate" and batch.features is not None:
                alternate = "text" if i % 2 == 0 else "visual"
            res = train_step(model, batch, loss_config, state, train_config.clip_norm, drop_rng, alternate)
            tlog.max_post_clip_norm = max(tlog.max_post_clip_norm, res.post_clip_norm)
            totals["loss"].append(res.loss)
            if res.loss_t is not None:
                totals["loss_t"].append(res.loss_t)
            if res.loss_v is not None:
                totals["loss_v"].append(res.loss_v)
        val_bleu = None
        if epoch % train_config.validation_interval == 0:
            val_bleu = corpus_bleu_of(model, data.val, train_config.max_decode_len)
        mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
        tlog.records.append(EpochRecord(epoch, mean(totals["loss"]), mean(totals["loss_t"]),
                                        mean(totals["loss_v"]), val_bleu,
                                        time.perf_counter() - start, train_config.seed, chash))
        log.info("epoch %d loss %.4f val BLEU %s", epoch, tlog.records[-1].loss, val_bleu)
        if val_bleu is not None:
            if val_bleu > tlog.best_val_bleu:
                tlog.best_val_bleu, tlog.best_epoch = val_bleu, epoch
                best = model.snapshot()
                stale = 0
            else:
                stale += 1
                if stale >= train_config.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    model.load_snapshot(best)
    return model, tlog


# ---------------------------------------------------------------------------
# ablations

TABLE2_ROWS = (
    {"encoder_init": "pretrained", "decoder_init": "pretrained", "decoder_fixed": True},
    {"encoder_init": "random", "decoder_init": "pretrained", "decoder_fixed": True},
    {"encoder_init": "pretrained", "decoder_init": "random", "decoder_fixed": False},
    {"encoder_init": "random", "decoder_init": "random", "decoder_fixed": False},
    {"encoder_init": "pretrained", "decoder_init": "pretrained", "decoder_fixed": False},
    {"encoder_init": "random", "decoder_init": "pretrained", "decoder_fixed": False},
)

TABLE3_ROWS = (
    ("full", {"multimodal": True}, {"visual_debias": True}),
    ("-debias", {"multimodal": True}, {"visual_debias": False}),
    ("-images", {"multimodal": False}, {"visual_debias": True}),
)

ABLATION_COLUMNS = ("matrix", "row", "encoder", "decoder", "fixed", "images", "debias",
                    "val_bleu", "test_bleu")


def _init_name(mode: str) -> str:
    return "fasttext" if mode == "pretrained" else "random"


def ablation_rows(matrix: str) -> list[tuple[str, dict, dict]]:
    if matrix == "table2":
        return [(f"{_init_name(r['encoder_init'])}/{_init_name(r['decoder_init'])}/"
                 f"{'fixed' if r['decoder_fixed'] else 'tuned'}", dict(r), {}) for r in TABLE2_ROWS]
    if matrix == "table3":
        return [(name, dict(m), dict(t)) for name, m, t in TABLE3_ROWS]
    raise ConfigError(f"unknown ablation matrix {matrix!r}")


def run_ablation_matrix(train_config: TrainConfig, model_config: ModelConfig, data: ExperimentData,
                        matrices: Sequence[str] = ("table2", "table3"),
                        loss_config: LossConfig | None = None) -> list[dict]:
    """Train one model per ablation row on the same data and seed."""
    results = []
    for matrix in matrices:
        for name, model_over, train_over in ablation_rows(matrix):
            mc = replace(model_config, **model_over)
            tc = replace(train_config, **train_over)
            model, tlog = train(tc, mc, data, loss_config)
            test_bleu = corpus_bleu_of(model, data.test, tc.max_decode_len) if data.test else float("nan")
            results.append({
                "matrix": matrix, "row": name,
                "encoder": _init_name(mc.encoder_init), "decoder": _init_name(mc.decoder_init),
                "fixed": "yes" if mc.decoder_fixed else "no",
                "images": "yes" if mc.multimodal else "no",
                "debias": "yes" if (mc.multimodal and tc.visual_debias) else "no",
                "val_bleu": round(tlog.best_val_bleu, 2), "test_bleu": round(test_bleu, 2),
            })
    return results


def write_ablation_csv(results: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow({k: (f"{r[k]:.2f}" if k.endswith("bleu") else r[k]) for k in ABLATION_COLUMNS})


def run_seeds(train_config: TrainConfig, model_config: ModelConfig, data: ExperimentData,
              seeds: Sequence[int] = (1, 2, 3), loss_config: LossConfig | None = None) -> dict:
    """Train once per seed; report val/test BLEU as mean±sd strings."""
    val, test, logs = [], [], []
    for s in seeds:
        model, tlog = train(replace(train_config, seed=s), model_config, data, loss_config)
        val.append(tlog.best_val_bleu)
        test.append(corpus_bleu_of(model, data.test, train_config.max_decode_len) if data.test else float("nan"))
        logs.append(tlog)
    return {"seeds": list(seeds), "val_bleu": val, "test_bleu": test, "logs": logs,
            "val": format_mean_sd(val), "test": format_mean_sd(test)}
