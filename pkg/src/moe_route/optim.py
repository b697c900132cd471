"""First-order optimization over named parameter tensors."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adaptive-moment estimation with bias correction (decays 0.9/0.999,
    epsilon 1e-8).

    Updates are applied in place so parameter tensors keep their identity
    across steps. Only names present in the gradient map are updated;
    sparsely trained parameters (per-speaker routing vectors) rely on this,
    so each parameter carries its own bias-correction count.
    """

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._n = {k: 0 for k in self.params}

    def step(self, grads: dict) -> None:
        self.step_count += 1
        for name in sorted(grads):
            if name not in self.params:
                raise ValueError(f"unknown parameter '{name}'")
            g = np.asarray(grads[name], dtype=np.float64)
            t = self.params[name]
            if g.shape != t.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"'{name}' of shape {t.data.shape}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter '{name}'")
            self._n[name] += 1
            n = self._n[name]
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** n)
            vhat = v / (1.0 - self.beta2 ** n)
            t.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
