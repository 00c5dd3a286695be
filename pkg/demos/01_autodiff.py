"""Reverse-mode gradients on numpy arrays, checked against finite differences."""
import numpy as np

from probgnn import autodiff as ad
from probgnn.autodiff import Tensor, backward, gradient_check

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = rng.normal(size=(5, 3))

# softplus(x @ w), summed: a tiny one-layer network
loss = ad.tsum(ad.softplus(ad.matmul(x, w)))
backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# the same check the test suite uses for every primitive
err = gradient_check(lambda t: ad.tsum(ad.softplus(ad.matmul(x, t))), w)
print("max relative error vs central differences:", err)
