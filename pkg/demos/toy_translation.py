"""
Training on the synthetic substitution task
===========================================

Each source word maps to one target word through a hidden bijection; word
frequencies follow a Zipf law, and every sentence has a 32-dimensional
"image" derived from its bag of words.  The embedding-prediction model with
the visual auxiliary loss learns the mapping in a few minutes on one CPU.
"""

import logging
import sys

from embmmt.data import SyntheticSpec, generate_synthetic_task, source_words, synthetic_word_vectors, \
    target_words
from embmmt.evaluation import evaluate
from embmmt.model import ModelConfig
from embmmt.trainer import TOY_MODEL_OVERRIDES, TOY_TRAIN_OVERRIDES, ExperimentData, TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 50

task = generate_synthetic_task(SyntheticSpec(seed=1))
print("example pair:", " ".join(task.train.source[0]), "->", " ".join(task.train.target[0]))

dim = TOY_MODEL_OVERRIDES["emb_dim"]
data = ExperimentData(task.train, task.val, task.test, task.features,
                      synthetic_word_vectors(source_words(50), dim, 11),
                      synthetic_word_vectors(target_words(50), dim, 12))
model_cfg = ModelConfig(**TOY_MODEL_OVERRIDES)
train_cfg = TrainConfig(epochs=epochs, **TOY_TRAIN_OVERRIDES)
model, log = train(train_cfg, model_cfg, data)
print(f"best validation BLEU {log.best_val_bleu:.2f} at epoch {log.best_epoch}")

# %%
# Translate the test split and break the per-word F-score down by how often
# each target word occurred in training.  Rare words are the hard part.
hyps = model.translate_batch(task.test.source, train_cfg.max_decode_len)
report = evaluate(hyps, task.test.target, model.tgt_vocab.freqs, edges=(1, 10, 50, 100, 500))
print(report.summary())
for src, hyp in list(zip(task.test.source, hyps))[:3]:
    print(" ".join(src), "=>", " ".join(hyp))
