"""
The two training losses by hand
===============================

Translation is trained with a margin ranking loss on predicted word vectors:
the prediction should be closer to the gold word than to the most offending
other word by a margin.  The visual task pulls a sentence's latent vector
toward its own image and away from the other images in the batch.
"""

import numpy as np

from embmmt.losses import LossConfig, margin_ranking_terms, multitask_loss, select_negative, \
    visual_max_margin

# rows: <pad>, <unk>, <bos>, <eos>, cat, dog, car
table = np.array([
    [0.0, 0.0, 0.0],
    [0.1, 0.1, 0.9],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.1, 0.0],
    [0.9, 0.3, 0.0],
    [-1.0, 0.2, 0.1],
])
gold = 4  # "cat"
pred = np.array([0.95, 0.25, 0.0])  # between cat and dog

neg = select_negative(pred, [gold], table)[0]
print("most offending negative:", neg, "(dog)")
term = margin_ranking_terms(pred[None, None], [[gold]], [[1.0]], table, gamma=0.5).data[0, 0]
print("hinge term with margin 0.5:", round(float(term), 4))

# %%
# Moving the prediction onto "cat" and then away from "dog" shrinks the term.
# It only vanishes once "dog" is 0.5 further away in cosine distance than "cat".
for p in ([1.0, 0.1, 0.0], [1.0, -0.6, 0.0]):
    t = margin_ranking_terms(np.array(p)[None, None], [[gold]], [[1.0]], table).data[0, 0]
    print(p, "->", round(float(t), 4))

# %%
# The visual loss sums hinge terms over every (sentence, other image) pair.
rng = np.random.default_rng(0)
images = rng.normal(size=(4, 5))
aligned = images + 0.05 * rng.normal(size=(4, 5))
print("visual loss, aligned latents:", round(visual_max_margin(aligned, images).item(), 4))
print("visual loss, random latents: ", round(visual_max_margin(rng.normal(size=(4, 5)), images).item(), 4))

# %%
# The joint objective weights the translation loss by lambda = 0.01.
cfg = LossConfig()
print("J for J_T=2, J_V=3:", round(multitask_loss(2.0, 3.0, cfg.lam), 6))
