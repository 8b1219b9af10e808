from __future__ import annotations

import numpy as np


class Adam:
    """One Adam optimizer over named parameter arrays with per-group learning rates.

    State rows of per-Gaussian groups can be remapped after densification.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.steps.setdefault(name, 0)
        self.steps[name] += 1
        k = self.steps[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**k)
        vhat = v / (1 - self.beta2**k)
        return param - lr * mhat / (np.sqrt(vhat) + self.eps)

    def remap_rows(self, name: str, source_rows: np.ndarray) -> None:
        """Rebuild row state: new row r takes old row source_rows[r], or zeros when it is -1."""
        if name not in self.m:
            return
        src = np.asarray(source_rows)
        for store in (self.m, self.v):
            old = store[name]
            new = np.zeros((len(src),) + old.shape[1:])
            keep = src >= 0
            new[keep] = old[src[keep]]
            store[name] = new
