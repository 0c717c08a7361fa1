"""Reverse-mode gradients on numpy arrays, checked against finite differences.

Run: python3 demos/gradients.py
"""
import numpy as np

from hccm import tensor as T
from hccm.checks import full_gradcheck
from hccm.tensor import Tensor

rng = np.random.default_rng(0)

# A tiny convolution followed by a weighted sum. backward() fills .grad on every leaf.
x = Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
k = Tensor(rng.normal(size=(3, 3, 2, 4)), requires_grad=True)
w = rng.normal(size=(3, 3, 4))
loss = T.tsum(T.mul(T.conv2d(x, k, stride=2, padding="same"), w))
T.backward(loss)
print(f"loss {loss.item():.4f}; kernel grad shape {k.grad.shape}, input grad shape {x.grad.shape}")

# The same gradients from central differences.
err = T.grad_check(lambda: T.tsum(T.mul(T.conv2d(x, k, stride=2, padding="same"), w)), [x, k])
print(f"max relative error vs central differences: {err:.2e}")

# Masked softmax ignores padded slots entirely.
scores = Tensor([[2.0, 1.0, 9.0], [0.5, 0.5, 0.5]])
mask = np.array([[True, True, False], [True, True, True]])
print("masked softmax rows:\n", T.softmax(scores, mask).data.round(4))

# Whole-model check on the 8x8 toy configuration, every trainable parameter.
for variant in ("DIN", "HCCM"):
    res = full_gradcheck(variant)
    print(f"{variant:5s} gradcheck: {res.n_parameters} parameters, max rel error {res.max_rel_error:.2e}, "
          f"frozen grads zero: {res.frozen_grad_zero}")
