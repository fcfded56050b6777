"""
Does the image task help?  A small ablation
===========================================

Runs the three visual-feature variants on the synthetic task: full model,
images without centroid subtraction, and text only.  With a short budget the
numbers are noisy; pass an epoch count to train longer.
"""

import sys

from embmmt.data import SyntheticSpec, generate_synthetic_task, source_words, synthetic_word_vectors, \
    target_words
from embmmt.model import ModelConfig
from embmmt.trainer import TOY_MODEL_OVERRIDES, TOY_TRAIN_OVERRIDES, ExperimentData, TrainConfig, \
    run_ablation_matrix, write_ablation_csv

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
task = generate_synthetic_task(SyntheticSpec(seed=1))
dim = TOY_MODEL_OVERRIDES["emb_dim"]
data = ExperimentData(task.train, task.val, task.test, task.features,
                      synthetic_word_vectors(source_words(50), dim, 11),
                      synthetic_word_vectors(target_words(50), dim, 12))

results = run_ablation_matrix(TrainConfig(epochs=epochs, **TOY_TRAIN_OVERRIDES),
                              ModelConfig(**TOY_MODEL_OVERRIDES), data, matrices=("table3",))
for r in results:
    print(f"{r['row']:>8}  images={r['images']:<3} debias={r['debias']:<3} "
          f"val {r['val_bleu']:6.2f}  test {r['test_bleu']:6.2f}")
write_ablation_csv(results, "ablation_table3.csv")
print("wrote ablation_table3.csv")
