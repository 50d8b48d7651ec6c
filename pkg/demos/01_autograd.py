"""Reverse-mode gradients on a two-layer network, checked against central differences."""

import numpy as np

from smad import autograd as ag

rng = np.random.default_rng(0)
x = ag.Tensor(rng.normal(size=(4, 3)))
w1 = ag.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = ag.Tensor(rng.normal(size=(5, 2)), requires_grad=True)


def forward():
    h = ag.relu(ag.matmul(x, w1))
    return ag.tsum(ag.mul(ag.matmul(h, w2), ag.matmul(h, w2)))


loss = forward()
ag.backward(loss)
print(f"loss {loss.item():.6f}")

eps = 1e-6
for name, p in (("w1", w1), ("w2", w2)):
    idx = (1, 1)
    old = p.data[idx]
    p.data[idx] = old + eps
    with ag.no_grad():
        up = forward().item()
    p.data[idx] = old - eps
    with ag.no_grad():
        down = forward().item()
    p.data[idx] = old
    print(f"d loss / d {name}{idx}: analytic {p.grad[idx]:+.8f}  numeric {(up - down) / (2 * eps):+.8f}")

# a second backward on the same graph is refused
try:
    ag.backward(loss)
except ag.GradError as exc:
    print("second backward:", exc)
