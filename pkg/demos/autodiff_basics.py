"""
Reverse-mode gradients, clipping and Adam
=========================================

The model is built on a small define-by-run autodiff layer over numpy.
This script differentiates a two-layer expression, compares the result with
central differences, then takes one clipped Adam step.
"""

import numpy as np

from embmmt import autodiff as ad
from embmmt.autodiff import Tensor

rng = ad.make_rng(0)
W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = rng.normal(size=(3, 5))

# f(W) = mean(tanh(W x)); every operation is recorded as it runs
loss = ad.mean(ad.tanh(ad.matmul(W, x)))
ad.backward(loss)
print("loss:", round(loss.item(), 6))


def f():
    return float(np.mean(np.tanh(W.data @ x)))


numeric = ad.numerical_grad(f, W.data)
print("relative error vs central differences:", ad.relative_error(W.grad, numeric))

# %%
# Clipping rescales all gradients together when their joint L2 norm
# exceeds the threshold.  Here we inflate the gradient first.
W.grad *= 50.0
print("norm before clipping:", round(ad.global_grad_norm([W]), 4))
factor = ad.clip_grad_norm([W], 1.0)
print("scale factor:", round(factor, 4), "norm after:", round(ad.global_grad_norm([W]), 4))

# %%
# One Adam step with the default learning rate of 4e-4.
state = ad.AdamState.create({"W": W})
before = W.data.copy()
ad.adam_step({"W": W}, state)
print("largest parameter change:", float(np.max(np.abs(W.data - before))))
