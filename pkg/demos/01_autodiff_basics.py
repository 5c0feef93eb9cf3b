#!/usr/bin/env python3
"""Tour of the tensor engine: taped forward, reverse sweep, Adam updates."""

import numpy as np

from xsmoe import numerics as nm
from xsmoe.numerics import Tensor
from xsmoe.optim import Adam

print("== exact-erf GELU ==")
x = Tensor([-2.0, -1.0, 0.0, 0.5, 1.0, 2.0])
print("gelu:", np.round(nm.gelu(x).data, 6))

print("\n== taped backward ==")
w = Tensor(np.array([[0.5, -0.3], [0.8, 0.1]]), requires_grad=True)
v = Tensor(np.array([[1.0], [2.0]]))
loss = nm.mean(nm.gelu(nm.matmul(w, v)))
print("nodes on tape:", len(nm.graph()))
nm.backward(loss)
print("dL/dw:\n", w.grad)
print("tape cleared:", len(nm.graph()) == 0)

print("\n== fitting a line with Adam ==")
rng = np.random.default_rng(0)
xs = Tensor(rng.uniform(-1, 1, size=(64, 1)))
ys = 3.0 * xs.data - 0.7
slope = Tensor([[0.0]], requires_grad=True)
bias = Tensor([0.0], requires_grad=True)
opt = Adam([slope, bias], lr=0.05)
for step in range(200):
    pred = nm.add(nm.matmul(xs, slope), bias)
    err = nm.sub(pred, Tensor(ys))
    loss = nm.mean(nm.mul(err, err))
    nm.backward(loss)
    opt.step()
    opt.zero_grad()
print(f"learned slope={slope.data[0,0]:.3f} bias={bias.data[0]:.3f} (target 3.0, -0.7)")

print("\n== inference mode records nothing ==")
with nm.no_grad():
    nm.matmul(w, v)
print("nodes on tape:", len(nm.graph()))
