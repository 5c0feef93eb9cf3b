#!/usr/bin/env python3
"""Life cycle of a side layer: routing, expansion, utilization, pruning."""

import numpy as np

from xsmoe.model import SideNetwork
from xsmoe.numerics import Tensor

rng = np.random.default_rng(0)
d, d_prime = 8, 4
net = SideNetwork.build("visual", d, d_prime, depth=1, rng=rng)
layer = net.layers[0]

h = Tensor(rng.normal(size=(4, d)).astype(np.float32))
backbone = Tensor(rng.normal(size=(4, d)).astype(np.float32))

print("== warm-up: one expert, zero-initialized router ==")
alpha = layer.router.mixture_weights(h).data
print("mixture weights (backbone, expert):", np.round(alpha[0], 3))

print("\n== three window boundaries: freeze all, append the mean ==")
for window in (1, 2, 3):
    layer.expand(window)
    frozen = [e.frozen for e in layer.experts]
    print(f"after expand({window}): {layer.n_experts} experts, frozen={frozen}, "
          f"router rows={layer.router.rows}")

print("\n== utilization over a monitored pass ==")
# in a real run the router has trained by now; stand in with random weights
layer.router.weights.data[...] = rng.normal(size=layer.router.weights.shape)
layer.arm_utilization(True)
for _ in range(10):
    layer.forward(Tensor(rng.normal(size=(16, d)).astype(np.float32)),
                  Tensor(rng.normal(size=(16, d)).astype(np.float32)))
r = layer.finalize_utilization()
print("utilization shares:", np.round(r, 4), "sum:", round(float(r.sum()), 6))

print("\n== pruning at tau = 0.25 ==")
removed = layer.prune(r, tau=0.25)
print(f"removed expert index: {removed}; "
      f"{layer.n_experts} experts remain, router rows={layer.router.rows}")

counts = net.param_counts()
print(f"\nparameters: total={counts['total']} trainable={counts['trainable']}")
