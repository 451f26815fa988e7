"""Adam over named numpy parameter arrays."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam with one learning rate per named parameter.

    State rows follow the parameter's first axis so surfel densification can
    clone or drop them (:meth:`select_rows`, :meth:`append_rows`).
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place update of ``param``."""
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.steps[name] = 0
        self.steps[name] += 1
        t = self.steps[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        if lr != 0.0:
            param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def select_rows(self, names, idx) -> None:
        for name in names:
            if name in self.m:
                self.m[name] = self.m[name][idx]
                self.v[name] = self.v[name][idx]

    def append_rows(self, names, count: int) -> None:
        """Zero state for ``count`` new trailing rows."""
        for name in names:
            if name in self.m:
                pad = np.zeros((count,) + self.m[name].shape[1:])
                self.m[name] = np.concatenate([self.m[name], pad])
                self.v[name] = np.concatenate([self.v[name], pad])

    def reset(self, name: str) -> None:
        if name in self.m:
            self.m[name][...] = 0.0
            self.v[name][...] = 0.0

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"t/{name}"] = np.array([self.steps[name]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.steps = {}, {}, {}
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.m[name] = arr.copy()
            elif kind == "v":
                self.v[name] = arr.copy()
            elif kind == "t":
                self.steps[name] = int(arr[0])
