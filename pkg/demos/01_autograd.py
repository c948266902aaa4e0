"""The numpy autograd engine in five minutes.

Operations record onto a tape only inside ``with Graph()``. ``backward``
replays the tape in reverse and accumulates gradients on leaf tensors, which
we compare against central finite differences.
"""

import numpy as np

from treespec.checks import fd_relative_error
from treespec.tensor import Graph, Tensor, cosine_similarity, matmul, rms_norm, softmax

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
g = Tensor(np.ones(8), requires_grad=True)

with Graph() as tape:
    h = rms_norm(matmul(x, w), g, 1e-5)
    loss = (softmax(h) * h).sum()

print("ops on tape:", tape.op_names())
tape.backward(loss)
print("dL/dw norm:", float(np.linalg.norm(w.grad)))


def f(ts):
    xv, wv, gv = ts
    hv = rms_norm(matmul(xv, wv), gv, 1e-5)
    return (softmax(hv) * hv).sum()


err = fd_relative_error(f, [x.data, w.data, g.data])
print(f"relative error against finite differences: {err:.2e}")

# cosine similarity stays finite at the zero vector, gradient included
q = Tensor(np.zeros((1, 4)), requires_grad=True)
k = Tensor(np.ones((1, 4)), requires_grad=True)
with Graph() as tape:
    c = cosine_similarity(q, k).sum()
tape.backward(c)
print("cosine at zero:", float(c.data), "grad finite:", bool(np.isfinite(q.grad).all()))
