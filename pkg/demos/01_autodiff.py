"""
Reverse-mode autodiff on numpy arrays
=====================================

Everything trainable in the package is built from ``vitsmall.tensor``: a
small tape-based autodiff over numpy. This script builds a two-layer
classifier by hand, backpropagates, and checks the gradient against central
finite differences.
"""

import numpy as np

from vitsmall import tensor as T

rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((4, 5)))
w1 = T.parameter(rng.standard_normal((5, 8)) * 0.5)
b1 = T.parameter(np.zeros(8))
w2 = T.parameter(rng.standard_normal((8, 3)) * 0.5)
targets = np.eye(3)[[0, 2, 1, 1]]


def loss_fn():
    h = T.gelu(T.linear(x, w1, b1))
    return T.cross_entropy(T.matmul(h, w2), targets)


loss = loss_fn()
T.backward(loss)
print("loss", loss.item())

###############################################################################
# Central differences for one weight matrix. The analytic and numerical
# gradients should agree to about 1e-9 in float64.

h = 1e-5
num = np.zeros_like(w1.data)
for idx in np.ndindex(*w1.shape):
    old = w1.data[idx]
    w1.data[idx] = old + h
    up = loss_fn().item()
    w1.data[idx] = old - h
    down = loss_fn().item()
    w1.data[idx] = old
    num[idx] = (up - down) / (2 * h)
err = np.linalg.norm(num - w1.grad) / np.linalg.norm(num)
print("relative gradient error for w1:", err)

###############################################################################
# Gradients accumulate until cleared, and ``no_grad`` skips graph building.

T.backward(loss_fn())
print("after a second backward, grad doubled:", np.allclose(w1.grad, 2 * num, atol=1e-6))
w1.grad = None
with T.no_grad():
    y = loss_fn()
print("no_grad output has a graph:", y.requires_grad)
