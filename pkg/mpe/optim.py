"""
Adam with bias correction and decoupled weight decay over named numpy parameters.
"""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(
        self,
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        decayed: set[str] | None = None,
        lr_overrides: dict[str, float] | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.lr = lr
        self.weight_decay = weight_decay
        # Only these parameter names receive weight decay.
        self.decayed = decayed or set()
        self.lr_overrides = lr_overrides or {}
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update `params` in place from `grads`; names missing from `grads` are left alone."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t

        for name, param in params.items():
            if name not in grads:
                continue
            g = grads[name]
            lr = self.lr_overrides.get(name, self.lr)

            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)

            if self.weight_decay and name in self.decayed:
                param -= lr * self.weight_decay * param
            param -= (lr / bc1) * self.m[name] / (np.sqrt(self.v[name] / bc2) + self.epsilon)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array(self.t, dtype=np.int64)}
        state.update({f"m.{name}": value.copy() for name, value in self.m.items()})
        state.update({f"v.{name}": value.copy() for name, value in self.v.items()})
        return state
