"""A tour of the tensor core: forward ops, reverse-mode gradients, MAC counting.

Run:  python demos/01_autodiff_core.py
"""

import numpy as np

from ceit import tensor as T
from ceit.gradcheck import numerical_gradient, relative_error
from ceit.tensor import Tensor

rng = np.random.default_rng(0)

# %% Tensors default to float64 and only track history when asked to.
x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.2, requires_grad=True)
print("input", x.shape, x.dtype)

# %% A small conv -> GELU -> pool -> linear pipeline, built from primitive ops.
h = T.max_pool2d(T.gelu(T.conv2d(x, w, padding=1)), 2)
feat = h.reshape(2, -1)
W = Tensor(rng.normal(size=(feat.shape[1], 5)) * 0.1, requires_grad=True)
loss = T.cross_entropy(T.linear(feat, W), [1, 3])
print("loss", loss.item())

# %% One backward call fills .grad on every leaf that requires it.
loss.backward()
print("grad shapes", x.grad.shape, w.grad.shape, W.grad.shape)


# %% Check the conv weight gradient against central differences.
def f():
    with T.no_grad():
        hh = T.max_pool2d(T.gelu(T.conv2d(x, w, padding=1)), 2)
        return T.cross_entropy(T.linear(hh.reshape(2, -1), W), [1, 3]).item()


num = numerical_gradient(f, w)
print("max relative error on conv weight:", relative_error(w.grad, num, floor=1e-8).max())

# %% count_macs() tallies the multiply-accumulates of matmul and convolution.
with T.no_grad(), T.count_macs() as counter:
    T.conv2d(x, w, padding=1)
    T.matmul(Tensor(np.ones((6, 7))), Tensor(np.ones((7, 2))))
print("MACs by op:", counter.by_op)
