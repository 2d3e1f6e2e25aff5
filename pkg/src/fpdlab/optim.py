"""Momentum-free optimizer with per-parameter RMS scaling."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class RmsScaledSgd:
    """SGD whose step is scaled by a running RMS of per-parameter gradients.

    No momentum term, so training is reproducible from (params, state, seed)
    alone. State is exposed as plain arrays for checkpointing.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, rho: float = 0.99, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.rho = float(rho)
        self.eps = float(eps)
        self.ms = {name: np.zeros_like(p.values) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            m = self.ms[name]
            m *= self.rho
            m += (1.0 - self.rho) * g * g
            p.values = p.values - self.lr * g / (np.sqrt(m) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p._grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: m.copy() for name, m in self.ms.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.ms:
            self.ms[name] = np.array(arrays[name], dtype=np.float64)
