"""A tour of the tiny autodiff engine that powers everything else.

Build a computation from Tensors, call backward() on a scalar loss, and
read gradients off the leaves. Finite differences confirm the gradients.
"""

import numpy as np

from capsdefense import autodiff as ad
from capsdefense.autodiff import Tensor
from capsdefense.gradcheck import grad_check

rng = np.random.default_rng(0)

# a scalar chain: loss = sum((x @ w + b)^2)
x = Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2)).astype(np.float32), requires_grad=True)
b = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)

y = ad.dense(x, w, b)
loss = (y * y).sum()
loss.backward()

print("loss      =", float(loss.data))
print("dloss/db  =", b.grad)          # sums of 2*y over the batch
print("dloss/dx norm =", np.linalg.norm(x.grad))

# the same derivative, numerically
err = grad_check(lambda x_, w_, b_: (ad.dense(x_, w_, b_) ** 2).sum(),
                 [x.data, w.data, b.data], seed=1)
print(f"max rel. error vs finite differences: {err:.2e}")

# convolution gradients flow to the input too, which is what the attacks use
img = Tensor(rng.random((1, 1, 8, 8)).astype(np.float32), requires_grad=True)
k = Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32) * 0.1)
feat = ad.conv2d(img, k, None, stride=1, padding=1)
feat.sum().backward()
print("input-gradient shape:", img.grad.shape)

# gradients accumulate when a tensor is used twice
a = Tensor(np.array(3.0, dtype=np.float32), requires_grad=True)
(a * a).backward()          # d(a^2)/da = 2a = 6
print("shared-use gradient:", float(a.grad))
