"""Adam optimizer over the numerics tensors."""

import numpy as np

from .errors import ContractError, NumericalAbort
from .numerics import Tensor


class AdamState:
    """Per-parameter moment buffers."""

    __slots__ = ("m", "v")

    def __init__(self, param: Tensor):
        self.m = np.zeros_like(param.data)
        self.v = np.zeros_like(param.data)


class Adam:
    """Bias-corrected Adam. Only tensors with requires_grad are registered;
    frozen tensors can never be touched."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.state = {id(p): AdamState(p) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        """Apply one update in place. Raises NumericalAbort on NaN/Inf grads."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(
                    f"non-finite gradient for parameter {p.name or id(p)} at step {t}"
                )
            st = self.state[id(p)]
            st.m *= self.beta1
            st.m += (1.0 - self.beta1) * g
            st.v *= self.beta2
            st.v += (1.0 - self.beta2) * (g * g)
            m_hat = st.m / bc1
            v_hat = st.v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype, copy=False
            )
