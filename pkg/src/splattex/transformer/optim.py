from __future__ import annotations

import numpy as np


def round_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


class Adam:
    """Adam with bias correction.

    With ``f32_state`` the parameters and moments are rounded to float32 values
    after every step, so a checkpoint written as float32 holds the exact state.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 f32_state: bool = True, lr_scale: dict | None = None):
        self.lr = lr
        # optional per-element learning-rate multipliers, keyed like params
        self.lr_scale = lr_scale or {}
        self.b1, self.b2 = betas
        self.eps = eps
        self.f32_state = f32_state
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        if self.lr == 0.0:
            self.t += 1
            return
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            lr = self.lr * self.lr_scale[k] if k in self.lr_scale else self.lr
            p = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.f32_state:
                m, v, p = round_f32(m), round_f32(v), round_f32(p)
            self.m[k], self.v[k] = m, v
            params[k][...] = p

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}
