"""Command-line entry point: ``embmmt <subcommand> ...``.

Exit status is 0 on success, 1 when a configuration or input fails
validation, and 2 when a file cannot be read or written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import (
    SyntheticSpec,
    generate_synthetic_task,
    load_parallel,
    load_visual_features,
    preprocess_text,
    read_lines,
    save_image_index,
    save_visual_features,
    source_words,
    synthetic_word_vectors,
    target_words,
)
from .embeddings import (
    DEFAULT_DIM,
    DEFAULT_TOP_K,
    Vocabulary,
    assemble_table,
    build_unknown_embedding,
    debias_all_but_top,
    load_word_vectors,
    save_word_vectors,
)
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .evaluation import evaluate
from .losses import LossConfig
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (
    ExperimentData,
    TOY_MODEL_OVERRIDES,
    TOY_TRAIN_OVERRIDES,
    TrainConfig,
    corpus_bleu_of,
    run_ablation_matrix,
    train,
    write_ablation_csv,
)

log = logging.getLogger("embmmt")

EXIT_VALIDATION = 1
EXIT_IO = 2

DATA_KEYS = ("train_src", "train_tgt", "train_images", "val_src", "val_tgt", "val_images",
             "test_src", "test_tgt", "test_images", "features")


# ---------------------------------------------------------------------------
# experiment configuration


def _check_keys(section: str, given, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")


@dataclass
class ExperimentConfig:
    """Everything one run needs, read from a JSON file.

    Top-level keys: ``seed``, ``model``, ``train``, ``loss``, ``data``,
    ``embeddings`` (``source``/``target`` vector files) and ``output_dir``.
    Relative paths resolve against the config file's directory.
    """

    seed: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    output_dir: str = "run"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentConfig":
        _check_keys("config", d, {f.name for f in fields(cls)})
        _check_keys("model", d.get("model", {}), {f.name for f in fields(ModelConfig)})
        _check_keys("train", d.get("train", {}), {f.name for f in fields(TrainConfig)} - {"seed"})
        _check_keys("loss", d.get("loss", {}), {f.name for f in fields(LossConfig)})
        _check_keys("data", d.get("data", {}), DATA_KEYS)
        _check_keys("embeddings", d.get("embeddings", {}), ("source", "target"))
        seed = d.get("seed", 1)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
            train_cfg = TrainConfig(**{**d.get("train", {}), "seed": seed})
            loss = LossConfig(**d.get("loss", {}))
        except (TypeError, ContractError) as exc:
            raise ConfigError(str(exc)) from None

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() or base is None else base / p)

        data = {k: resolve(v) for k, v in d.get("data", {}).items()}
        embeddings = {k: resolve(v) for k, v in d.get("embeddings", {}).items()}
        return cls(seed, model, train_cfg, loss, data, embeddings, resolve(d.get("output_dir", "run")))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        train_cfg = asdict(self.train)
        train_cfg.pop("seed")
        return {"seed": self.seed, "model": self.model.to_dict(), "train": train_cfg,
                "loss": asdict(self.loss), "data": dict(self.data),
                "embeddings": dict(self.embeddings), "output_dir": self.output_dir}

    def write_resolved(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_experiment_data(cfg: ExperimentConfig) -> ExperimentData:
    d = cfg.data
    for key in ("train_src", "train_tgt", "val_src", "val_tgt"):
        if not d.get(key):
            raise ConfigError(f"data.{key} is required")

    def corpus(split):
        if not d.get(f"{split}_src"):
            return None
        return load_parallel(d[f"{split}_src"], d[f"{split}_tgt"], split, d.get(f"{split}_images"))

    features = load_visual_features(d["features"]) if d.get("features") else None
    vectors = {}
    for side, mode in (("source", cfg.model.encoder_init), ("target", cfg.model.decoder_init)):
        path = cfg.embeddings.get(side)
        vectors[side] = load_word_vectors(path, cfg.model.emb_dim) if path and mode == "pretrained" else None
    return ExperimentData(corpus("train"), corpus("val"), corpus("test"), features,
                          vectors["source"], vectors["target"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_prep_embeddings(args) -> int:
    raw = load_word_vectors(args.vectors, args.dim)
    sentences = [preprocess_text(line) for line in read_lines(args.corpus)]
    vocab = Vocabulary.build(sentences, args.vocab_size)
    unk = build_unknown_embedding(raw, vocab)
    table = assemble_table(raw, vocab, unk, "pretrained", args.dim, ad.make_rng(args.seed))
    table, report = debias_all_but_top(table, args.top_k)
    save_word_vectors(args.out, vocab.itos, table.vectors)
    print(report.summary())
    print(f"wrote {len(vocab)} vectors to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config).with_seed(args.seed)
    out = Path(cfg.output_dir)
    cfg.write_resolved(out)
    data = load_experiment_data(cfg)
    model, tlog = train(cfg.train, cfg.model, data, cfg.loss)
    save_checkpoint(model, out / "model.ckpt", {"seed": cfg.seed})
    tlog.to_jsonl(out / "train_log.jsonl")
    print(f"best validation BLEU {tlog.best_val_bleu:.2f} at epoch {tlog.best_epoch}")
    if data.test is not None:
        hyps = model.translate_batch(data.test.source, cfg.train.max_decode_len)
        (out / "test.hyp").write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
        print(f"test BLEU {corpus_bleu_of(model, data.test, cfg.train.max_decode_len):.2f}")
    return 0


def cmd_translate(args) -> int:
    if args.max_len < 0:
        raise ConfigError("--max-len must be >= 0")
    model, _ = load_checkpoint(args.checkpoint)
    sentences = [preprocess_text(line) for line in read_lines(args.input)]
    hyps = model.translate_batch(sentences, args.max_len)
    Path(args.out).write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    hyps = [preprocess_text(line) for line in read_lines(args.hyp)]
    refs = [preprocess_text(line) for line in read_lines(args.ref)]
    freqs = None
    if args.train_corpus:
        freqs = Vocabulary.build([preprocess_text(l) for l in read_lines(args.train_corpus)], 1 << 62).freqs
    report = evaluate(hyps, refs, freqs)
    report.write(args.out)
    print(report.summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = ExperimentConfig.load(args.config).with_seed(args.seed)
    out = Path(cfg.output_dir)
    cfg.write_resolved(out)
    data = load_experiment_data(cfg)
    results = run_ablation_matrix(cfg.train, cfg.model, data, (args.matrix,), cfg.loss)
    path = out / f"ablation_{args.matrix}.csv"
    write_ablation_csv(results, path)
    print(path.read_text(encoding="utf-8"), end="")
    return 0


SYNTH_EXTRA = {"vector_dim": TOY_MODEL_OVERRIDES["emb_dim"]}


def cmd_synth(args) -> int:
    given = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    _check_keys("spec", given, {f.name for f in fields(SyntheticSpec)} | set(SYNTH_EXTRA))
    extra = {k: given.pop(k, v) for k, v in SYNTH_EXTRA.items()}
    if args.seed is not None:
        given["seed"] = args.seed
    spec = SyntheticSpec(**given)
    task = generate_synthetic_task(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_cfg = {}
    for name, corpus in task.splits().items():
        for side, sents in (("src", corpus.source), ("tgt", corpus.target)):
            (out / f"{name}.{side}").write_text("".join(" ".join(s) + "\n" for s in sents), encoding="utf-8")
            data_cfg[f"{name}_{side}"] = f"{name}.{side}"
        save_image_index(out / f"{name}.img", corpus.image_index)
        data_cfg[f"{name}_images"] = f"{name}.img"
    save_visual_features(out / "features.bin", task.features.features)
    data_cfg["features"] = "features.bin"
    dim = int(extra["vector_dim"])
    for side, words, seed in (("source", source_words, 11), ("target", target_words, 12)):
        vecs = synthetic_word_vectors(words(spec.vocab_size), dim, spec.seed * 1000 + seed)
        save_word_vectors(out / f"{side}.vec", list(vecs), np.stack(list(vecs.values())))
    experiment = {
        "seed": spec.seed,
        "model": {**TOY_MODEL_OVERRIDES, "emb_dim": dim, "latent_dim": spec.feature_dim},
        "train": dict(TOY_TRAIN_OVERRIDES),
        "data": data_cfg,
        "embeddings": {"source": "source.vec", "target": "target.vec"},
        "output_dir": "run",
    }
    (out / "experiment.json").write_text(json.dumps(experiment, sort_keys=True, indent=2) + "\n",
                                         encoding="utf-8")
    print(f"wrote synthetic task to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embmmt",
        description="Embedding-prediction translation with a visual auxiliary task.",
        epilog="exit status: 0 success, 1 invalid configuration or input, 2 unreadable/unwritable file",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep-embeddings", help="align, fill and debias a word-vector file")
    p.add_argument("--vectors", required=True, help="text vector file (word v1 ... vD per line)")
    p.add_argument("--corpus", required=True, help="training text, one sentence per line")
    p.add_argument("--vocab-size", type=int, default=10000, help="vocabulary size incl. 4 reserved tokens")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K, help="principal directions to remove (0 = centre only)")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM, help="vector dimension")
    p.add_argument("--seed", type=int, default=1, help="seed for vectors of missing bos/eos")
    p.add_argument("--out", required=True, help="output vector file")
    p.set_defaults(func=cmd_prep_embeddings)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (config default 1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="greedy-decode a text file with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--input", required=True, help="source text, one sentence per line")
    p.add_argument("--out", required=True, help="output file, one translation per line")
    p.add_argument("--max-len", type=int, default=100, help="maximum output tokens per sentence")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU and per-word F-score of a hypothesis file")
    p.add_argument("--hyp", required=True, help="system output, one sentence per line")
    p.add_argument("--ref", required=True, help="reference translations, one per line")
    p.add_argument("--train-corpus", default=None, help="target-side training text for word frequencies")
    p.add_argument("--out", required=True, help="directory for the CSV reports")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run one ablation matrix and write its CSV")
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--matrix", choices=("table2", "table3"), required=True,
                   help="table2: initialisation/fine-tuning rows; table3: debias/images rows")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (config default 1)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write the synthetic substitution task to a directory")
    p.add_argument("--spec", default=None, help="JSON with task fields (vocab_size, n_train, ..., vector_dim)")
    p.add_argument("--seed", type=int, default=None, help="override the task seed (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"embmmt {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FormatError) as exc:
        print(f"embmmt {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
