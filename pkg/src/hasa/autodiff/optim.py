"""Adam with bias correction, and SGD with momentum."""
from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from ..errors import UsageError
from .tensor import Parameter


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if not p.frozen]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Optional[dict[str, np.ndarray]] = None) -> None:
        """Apply one update. Grads come from ``grads`` by name, else from ``p.grad``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.frozen:
                continue
            g = grads.get(p.name) if grads is not None else p.grad
            if g is None:
                raise UsageError(f"no gradient for trainable parameter {p.name!r}")
            m, v = self.m[id(p)], self.v[id(p)]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {p.name: self.m[id(p)].copy() for p in self.params},
            "v": {p.name: self.v[id(p)].copy() for p in self.params},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for p in self.params:
            if p.name in state["m"]:
                self.m[id(p)] = np.array(state["m"][p.name], dtype=p.data.dtype)
                self.v[id(p)] = np.array(state["v"][p.name], dtype=p.data.dtype)


class SGD:
    """Heavy-ball momentum with L2 weight decay folded into the gradient."""

    def __init__(self, params: Iterable[Parameter], lr: float = 0.025, momentum: float = 0.9,
                 weight_decay: float = 3e-4):
        self.params = [p for p in params if not p.frozen]
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Optional[dict[str, np.ndarray]] = None) -> None:
        self.t += 1
        for p in self.params:
            if p.frozen:
                continue
            g = grads.get(p.name) if grads is not None else p.grad
            if g is None:
                raise UsageError(f"no gradient for trainable parameter {p.name!r}")
            buf = self.m[id(p)]
            buf *= self.momentum
            buf += g + self.weight_decay * p.data
            p.data = (p.data - self.lr * buf).astype(p.data.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": {p.name: self.m[id(p)].copy() for p in self.params}, "v": {}}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for p in self.params:
            if p.name in state["m"]:
                self.m[id(p)] = np.array(state["m"][p.name], dtype=p.data.dtype)


def adam_step(opt: Adam, grads: Optional[dict[str, np.ndarray]] = None) -> None:
    opt.step(grads)
