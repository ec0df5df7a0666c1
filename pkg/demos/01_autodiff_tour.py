"""A walk through the tape: build a small graph, pull gradients, check them by hand."""
import numpy as np

from aemim import tensor as T

rng = np.random.default_rng(0)

# leaves are Tensors that ask for gradients; everything else is a constant
x = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
w = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
gamma, beta = T.Tensor(np.ones(5)), T.Tensor(np.zeros(5))

h = T.matmul(x, w)                       # [2, 3, 5]
h = T.layer_norm(h, gamma, beta, 1e-6)
p = T.softmax(h, -1)
loss = T.mean(T.mul(p, p))
print("loss", loss.item())

# grad returns a plain dict of arrays keyed like the input mapping
g = T.grad(loss, {"x": x, "w": w})
print({k: v.shape for k, v in g.items()})

# central differences on one entry of w
h_ = 1e-6
w0 = w.data.copy()


def f(wv):
    q = T.softmax(T.layer_norm(T.matmul(T.Tensor(x.data), T.Tensor(wv)), gamma, beta, 1e-6), -1)
    return T.mean(T.mul(q, q)).item()


up, down = w0.copy(), w0.copy()
up[1, 2] += h_
down[1, 2] -= h_
print("autodiff", g["w"][1, 2], "finite diff", (f(up) - f(down)) / (2 * h_))

# detach cuts the graph: nothing flows back through a detached branch
d = T.detach(T.matmul(x, w))
loss2 = T.sum(T.mul(d, T.matmul(x, w)))
g2 = T.grad(loss2, {"w": w})
print("half-detached grad norm", np.linalg.norm(g2["w"]))
