"""Adam with bias correction."""
from __future__ import annotations

import numpy as np

from .errors import StateError


class Adam:
    """Adam over a named collection of tensors.

    Moments are stored in the parameters' dtype, keyed by name, so the full
    optimizer state can be written to and restored from a checkpoint.
    """

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise StateError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.float64)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["adam.t"][0])
        for k, p in self.params.items():
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=p.data.dtype).reshape(p.shape)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=p.data.dtype).reshape(p.shape)


def adam_step(params: list, state: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Functional form: one Adam update of ``params`` with moments kept in ``state``."""
    opt = state.get("opt")
    if opt is None:
        opt = state["opt"] = Adam({str(i): p for i, p in enumerate(params)}, lr, beta1, beta2, eps)
    opt.lr, opt.beta1, opt.beta2, opt.eps = lr, beta1, beta2, eps
    opt.step()
    state["t"] = opt.t
